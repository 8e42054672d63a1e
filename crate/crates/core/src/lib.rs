pub mod paillier;
pub mod codec;
pub mod batch;
pub mod storage;
pub mod arena;
pub mod flr;
pub mod bench;
