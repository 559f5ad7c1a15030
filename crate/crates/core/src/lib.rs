//! BitMoD: per-group FP3/FP4 weight quantization with adaptive special
//! values, bit-serial weight encoding, and a functional and cycle/energy
//! model of a bit-serial LLM accelerator.

pub mod archsim;
pub mod bitserial;
pub mod dtype;
pub mod npy;
pub mod pack;
pub mod pe;
pub mod quant;
pub mod synth;

pub use bitserial::{BitSerialError, BitSerialTerm, WeightEncoder};
pub use dtype::{DataType, DataTypeSpec, DtypeError, GridValue, GroupingConfig};
pub use quant::{ChannelQuantization, FloatTensor, QuantError, QuantizedGroup, QuantizedTensor};
