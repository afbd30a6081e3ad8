//! Framed transport for cut-layer traffic: byte-exact codec, in-process
//! loopback and TCP endpoints, and the device/aggregator session loops.

mod endpoint;
mod frame;
mod session;

pub use endpoint::{loopback_pair, ByteCounters, Endpoint, Loopback, Role, TcpEndpoint, DEFAULT_TIMEOUT};
pub use frame::{read_frame, Frame, MsgType, Values, FRAME_MAGIC};
pub use session::{run_aggregator, run_device, run_direct, run_loopback, Batch, SessionConfig, SessionLog, StepRecord};
