//! Streaming generation service: the session protocol, its transport-free
//! state machine, the WebSocket server and the `hint` command-line tool.

pub mod cli;
pub mod handler;
pub mod protocol;
pub mod server;
