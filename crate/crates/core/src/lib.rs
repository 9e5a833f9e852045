pub mod tensor;
pub mod hyperparams;
pub mod layers;
pub mod pcoder;
pub mod network;
pub mod weights;
pub mod corruption;
pub mod data;
pub mod training;
pub mod attacks;
pub mod io;
pub mod harness;
