//! Serial backend for the firmware link (115200 baud, 8N1).

use std::io::{Read, Write};
use std::time::Duration;

use deltapad_core::protocol::Link;
use serialport::SerialPort;

pub const BAUD_RATE: u32 = 115_200;

pub struct SerialLink {
    port: Box<dyn SerialPort>,
    id: String,
}

impl SerialLink {
    pub fn open(path: &str) -> serialport::Result<Self> {
        let port = serialport::new(path, BAUD_RATE)
            .data_bits(serialport::DataBits::Eight)
            .parity(serialport::Parity::None)
            .stop_bits(serialport::StopBits::One)
            .flow_control(serialport::FlowControl::None)
            .timeout(Duration::from_millis(20))
            .open()?;
        Ok(Self::from_port(port, format!("serial:{path}")))
    }

    pub fn from_port(port: Box<dyn SerialPort>, id: impl Into<String>) -> Self {
        Self { port, id: id.into() }
    }
}

impl Link for SerialLink {
    fn write_all(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.port.write_all(bytes)?;
        self.port.flush()
    }

    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> std::io::Result<usize> {
        self.port.set_timeout(timeout).map_err(std::io::Error::other)?;
        match self.port.read(buf) {
            Ok(n) => Ok(n),
            Err(e) if e.kind() == std::io::ErrorKind::TimedOut => Ok(0),
            Err(e) => Err(e),
        }
    }

    fn backend_id(&self) -> String {
        self.id.clone()
    }
}
