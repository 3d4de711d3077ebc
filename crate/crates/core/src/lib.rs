pub mod alignment;
pub mod data;
pub mod error;
pub mod linalg;
pub mod network;
pub mod selection;
pub mod spd;
pub mod trainer;
pub mod verify;
