//! Minimal dense autodiff substrate: matrices, a recording tape, layers and
//! the AdamW optimizer.

mod layers;
mod mat;
mod optim;
mod params;
mod tape;

pub use layers::{fourier_embed, fourier_embed_var, gelu, glorot, Dense, Gru, Mlp};
pub use mat::Mat;
pub use optim::{clip_grad_norm, lr_schedule, AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{norm_cdf, norm_pdf, Bound, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
