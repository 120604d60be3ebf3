//! Float intrinsics that route to the platform libm when `std` is present.
//! The pure-Rust `libm` fallback keeps `no_std` builds working but is several
//! times slower for `exp`, which dominates SiLU and softmax.

#[cfg(feature = "std")]
#[inline]
pub fn expf(x: f32) -> f32 {
    x.exp()
}

#[cfg(not(feature = "std"))]
#[inline]
pub fn expf(x: f32) -> f32 {
    libm::expf(x)
}
