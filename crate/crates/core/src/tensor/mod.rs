//! Dense numeric kernel: matrices, the feed-forward scoring head with reverse-mode
//! gradients, a finite-difference checker, Adam, and tensor checkpoints.

mod adam;
mod checkpoint;
mod dense;
mod gradcheck;
mod head;

pub use adam::AdamState;
pub(crate) use checkpoint::Reader;
pub use checkpoint::{
    decode_tensors, encode_tensors, load_manifest, load_tensors, manifest_path, save_tensors,
    TensorEntry, TensorManifest, TENSOR_MAGIC, TENSOR_VERSION,
};
pub use dense::{axpy, dot, gemm, DenseMatrix, Trans};
pub use gradcheck::grad_check;
pub use head::{HeadCache, HeadConfig, HeadGrads, MlpHead, Mode, ParamRole, BN_EPS};
