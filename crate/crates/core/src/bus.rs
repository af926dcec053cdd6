//! In-memory duplex serial link. Each direction is a FIFO of text lines; the
//! link is lossless and preserves order.

use std::collections::VecDeque;

#[derive(Debug, Default, Clone)]
pub struct SerialBus {
    to_device: VecDeque<String>,
    to_host: VecDeque<String>,
}

impl SerialBus {
    pub fn new() -> SerialBus {
        SerialBus::default()
    }

    /// Queues a line for the device. A missing trailing newline is added.
    pub fn host_write(&mut self, line: impl Into<String>) {
        self.to_device.push_back(terminate(line.into()));
    }

    pub fn device_write(&mut self, line: impl Into<String>) {
        self.to_host.push_back(terminate(line.into()));
    }

    pub fn device_available(&self) -> bool {
        !self.to_device.is_empty()
    }

    pub fn device_read_line(&mut self) -> Option<String> {
        self.to_device.pop_front()
    }

    pub fn host_read_lines(&mut self) -> Vec<String> {
        self.to_host.drain(..).collect()
    }
}

fn terminate(mut line: String) -> String {
    if !line.ends_with('\n') {
        line.push('\n');
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_and_framing() {
        let mut bus = SerialBus::new();
        bus.host_write("MODE 1");
        bus.host_write("MODE 2\n");
        assert!(bus.device_available());
        assert_eq!(bus.device_read_line().as_deref(), Some("MODE 1\n"));
        assert_eq!(bus.device_read_line().as_deref(), Some("MODE 2\n"));
        assert_eq!(bus.device_read_line(), None);

        bus.device_write("a");
        bus.device_write("b");
        assert_eq!(bus.host_read_lines(), vec!["a\n", "b\n"]);
        assert!(bus.host_read_lines().is_empty());
    }
}
