//! Small helpers for points of R^4 stored as `[f64; 4]`.

pub type Vec4 = [f64; 4];

pub const ZERO: Vec4 = [0.0; 4];

pub fn dot(a: &Vec4, b: &Vec4) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &Vec4) -> f64 {
    dot(a, a)
}

pub fn norm(a: &Vec4) -> f64 {
    norm2(a).sqrt()
}

pub fn add(a: &Vec4, b: &Vec4) -> Vec4 {
    std::array::from_fn(|i| a[i] + b[i])
}

pub fn sub(a: &Vec4, b: &Vec4) -> Vec4 {
    std::array::from_fn(|i| a[i] - b[i])
}

pub fn scale(s: f64, a: &Vec4) -> Vec4 {
    std::array::from_fn(|i| s * a[i])
}

/// `a + s b`
pub fn axpy(a: &Vec4, s: f64, b: &Vec4) -> Vec4 {
    std::array::from_fn(|i| a[i] + s * b[i])
}

pub fn unit(i: usize) -> Vec4 {
    let mut e = ZERO;
    e[i] = 1.0;
    e
}
