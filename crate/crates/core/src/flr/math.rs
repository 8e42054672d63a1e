//! Plaintext logistic-regression math. Labels are in {−1, +1}.

use std::f64::consts::LN_2;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `ln(1 + e^{−t})` without overflow.
fn softplus_neg(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

/// `(1/s′) Σ (σ(y·θᵀx) − 1)·y·x`.
pub fn exact_gradient(theta: &[f64], rows: &[&[f64]], labels: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for (x, &y) in rows.iter().zip(labels) {
        let coef = (sigmoid(y * dot(theta, x)) - 1.0) * y;
        for (gj, xj) in g.iter_mut().zip(x.iter()) {
            *gj += coef * xj;
        }
    }
    scale(&mut g, rows.len());
    g
}

/// `(1/|S|) Σ ln(1 + e^{−y·θᵀx})`. Empty sets yield `None`.
pub fn exact_loss(theta: &[f64], rows: &[&[f64]], labels: &[f64]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let total: f64 = rows.iter().zip(labels).map(|(x, &y)| softplus_neg(y * dot(theta, x))).sum();
    Some(total / rows.len() as f64)
}

/// Per-instance residue `¼·z − ½·y`.
pub fn fore_gradient(z: f64, y: f64) -> f64 {
    0.25 * z - 0.5 * y
}

/// Second-order loss term `ln 2 − ½·y·z + ⅛·z²`.
pub fn taylor_loss_term(z: f64, y: f64) -> f64 {
    LN_2 - 0.5 * y * z + 0.125 * z * z
}

/// `Σ fore_i · x_i` without the `1/s′` factor.
pub fn taylor_gradient_sum(fore: &[f64], rows: &[&[f64]], width: usize) -> Vec<f64> {
    let mut g = vec![0.0; width];
    for (x, &f) in rows.iter().zip(fore) {
        for (gj, xj) in g.iter_mut().zip(x.iter()) {
            *gj += f * xj;
        }
    }
    g
}

/// `(1/s′) Σ (¼·θᵀx − ½·y)·x`.
pub fn taylor_gradient(theta: &[f64], rows: &[&[f64]], labels: &[f64]) -> Vec<f64> {
    let fore: Vec<f64> = rows.iter().zip(labels).map(|(x, &y)| fore_gradient(dot(theta, x), y)).collect();
    let mut g = taylor_gradient_sum(&fore, rows, theta.len());
    scale(&mut g, rows.len());
    g
}

/// `(1/h) Σ (ln 2 − ½·y·θᵀx + ⅛·(θᵀx)²)`. Empty sets yield `None`.
pub fn taylor_loss(theta: &[f64], rows: &[&[f64]], labels: &[f64]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let total: f64 = rows.iter().zip(labels).map(|(x, &y)| taylor_loss_term(dot(theta, x), y)).sum();
    Some(total / rows.len() as f64)
}

fn scale(g: &mut [f64], count: usize) {
    if count > 0 {
        let inv = 1.0 / count as f64;
        g.iter_mut().for_each(|v| *v *= inv);
    }
}
