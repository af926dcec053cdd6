use crate::ForecastError;

fn check(y: &[f64], y_hat: &[f64]) -> Result<(), ForecastError> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(ForecastError::Shape(format!(
            "loss over {} targets and {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64, ForecastError> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64, ForecastError> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mse(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());
    }
}
