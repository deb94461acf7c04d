//! Dense linear algebra, seeded sampling and numerical helpers shared by the
//! rest of the crate.

mod blur;
mod gauss;
pub mod io;
mod mat;
mod ops;
mod rng;

pub use blur::{blur_operator, gaussian_blur_2d, gaussian_kernel_1d};
pub use gauss::{cholesky_psd, gauss_sample, solve_spd};
pub use mat::{dot, norm, Mat};
pub use ops::{cosine, finite_diff_grad, softmax_into, softmax_rows};
pub use rng::RngStream;
