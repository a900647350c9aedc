//! Small math utilities: 3-vectors, axis-aligned boxes, deterministic keyed
//! hashing for reproducible noise, and float helpers that bind to either
//! `std` or `libm`.

use core::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Float intrinsics, routed through `std` or `libm` depending on features.
///
/// Binaries built with the default `std` feature always use the platform
/// libm via std, which is what the same-platform determinism guarantees
/// assume.
pub mod flt {
    macro_rules! unary {
        ($name:ident) => {
            #[inline]
            pub fn $name(x: f64) -> f64 {
                #[cfg(feature = "std")]
                {
                    x.$name()
                }
                #[cfg(not(feature = "std"))]
                {
                    libm::$name(x)
                }
            }
        };
    }

    unary!(exp);
    unary!(ln);
    unary!(sqrt);
    unary!(floor);
    unary!(round);
    unary!(sin);
    unary!(cos);

    #[inline]
    pub fn abs(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.abs()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::fabs(x)
        }
    }

    #[inline]
    pub fn exp_m1(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.exp_m1()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::expm1(x)
        }
    }

    #[inline]
    pub fn ln_1p(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.ln_1p()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::log1p(x)
        }
    }

    #[inline]
    pub fn log2(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.log2()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::log2(x)
        }
    }

    #[inline]
    pub fn log10(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.log10()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::log10(x)
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 34.0 {
        x
    } else {
        flt::ln_1p(flt::exp(x))
    }
}

/// Derivative of [`softplus`], i.e. the logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + flt::exp(-x))
    } else {
        let e = flt::exp(x);
        e / (1.0 + e)
    }
}

/// A 3-component double vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm(self) -> f64 {
        flt::sqrt(self.dot(self))
    }

    #[inline]
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        self / n
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite()
            && self.max.is_finite()
            && self.min.x < self.max.x
            && self.min.y < self.max.y
            && self.min.z < self.max.z
    }

    #[inline]
    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    #[inline]
    pub fn diagonal(&self) -> f64 {
        self.size().norm()
    }

    /// Inclusive containment on all faces.
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Slab intersection with a ray `origin + t * dir`, restricted to t >= 0.
    /// Returns the entry/exit parameters, or `None` when the ray misses.
    pub fn ray_range(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        let o = [origin.x, origin.y, origin.z];
        let d = [dir.x, dir.y, dir.z];
        let lo = [self.min.x, self.min.y, self.min.z];
        let hi = [self.max.x, self.max.y, self.max.z];
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let mut ta = (lo[a] - o[a]) * inv;
            let mut tb = (hi[a] - o[a]) * inv;
            if ta > tb {
                core::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Dot product with four independent accumulators. The summation order is
/// fixed (lane-strided, remainder last), so results are deterministic; the
/// extra accumulators let the compiler pipeline the multiplies.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() & !3;
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i < n {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    for k in n..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += s * x`, element-wise.
#[inline]
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += s * xi;
    }
}

/// SplitMix64 finalizer. Counter-based: all randomness in the crate is a pure
/// function of a key, never of call order, so parallel schedules cannot
/// change results.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[inline]
pub fn hash2(a: u64, b: u64) -> u64 {
    mix64(mix64(a) ^ b)
}

#[inline]
pub fn hash3(a: u64, b: u64, c: u64) -> u64 {
    mix64(hash2(a, b) ^ c)
}

#[inline]
pub fn hash4(a: u64, b: u64, c: u64, d: u64) -> u64 {
    mix64(hash3(a, b, c) ^ d)
}

#[inline]
pub fn hash5(a: u64, b: u64, c: u64, d: u64, e: u64) -> u64 {
    mix64(hash4(a, b, c, d) ^ e)
}

/// Uniform in [0, 1) from a hash value (53 mantissa bits).
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in [-1/2, 1/2) from a hash value.
#[inline]
pub fn centered_f64(h: u64) -> f64 {
    unit_f64(h) - 0.5
}

/// Uniform in [-amp, amp) from a hash value.
#[inline]
pub fn symmetric_f64(h: u64, amp: f64) -> f64 {
    (unit_f64(h) * 2.0 - 1.0) * amp
}
