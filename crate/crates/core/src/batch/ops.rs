use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;

use super::{check_key, BatchError, CiphertextBatch, ExecutionBackend, Exponents, PlaintextBatch, Result, Shape};
use crate::codec;
use crate::paillier::{self, PaillierError, PrivateKey, PublicKey, RawCiphertext};

fn element_err(index: usize, source: PaillierError) -> BatchError {
    BatchError::Element { index, source }
}

/// Encrypts every mantissa under a fresh nonce. Nonces are drawn from `rng`
/// in index order before any work is scheduled, so the output depends only
/// on the rng state.
pub fn batch_encrypt<R: RngCore + ?Sized>(
    pk: &PublicKey,
    p: &PlaintextBatch,
    rng: &mut R,
    backend: &ExecutionBackend,
) -> Result<CiphertextBatch> {
    let nonces: Vec<BigUint> = (0..p.count()).map(|_| pk.random_nonce(rng)).collect();
    batch_encrypt_with_nonces(pk, p, &nonces, backend)
}

pub fn batch_encrypt_with_nonces(
    pk: &PublicKey,
    p: &PlaintextBatch,
    nonces: &[BigUint],
    backend: &ExecutionBackend,
) -> Result<CiphertextBatch> {
    check_key(pk, p.key())?;
    if nonces.len() != p.count() {
        return Err(BatchError::Invalid("nonce count differs from element count"));
    }
    let m = p.mantissas();
    let payload = backend
        .try_map(p.count(), |i| paillier::encrypt_raw(pk, &m[i], &nonces[i]).map(|c| c.value))
        .map_err(|(i, e)| element_err(i, e))?;
    Ok(CiphertextBatch {
        key: pk.id(),
        shape: p.shape(),
        exponents: p.exponents().clone(),
        payload,
    })
}

pub fn batch_decrypt(sk: &PrivateKey, c: &CiphertextBatch, backend: &ExecutionBackend) -> Result<PlaintextBatch> {
    let pk = sk.public_key();
    check_key(pk, c.key())?;
    let payload = c.payload();
    let mantissas = backend
        .try_map(c.count(), |i| paillier::decrypt_raw(sk, &RawCiphertext::new(payload[i].clone(), true)))
        .map_err(|(i, e)| element_err(i, e))?;
    Ok(PlaintextBatch {
        key: pk.id(),
        shape: c.shape(),
        exponents: c.exponents().clone(),
        mantissas,
    })
}

/// Element-wise ciphertext sum. Exponents must already agree.
pub fn batch_add(
    pk: &PublicKey,
    a: &CiphertextBatch,
    b: &CiphertextBatch,
    backend: &ExecutionBackend,
) -> Result<CiphertextBatch> {
    check_key(pk, a.key())?;
    check_key(pk, b.key())?;
    if a.shape() != b.shape() {
        return Err(BatchError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    if let Some(index) = (0..a.count()).find(|&i| a.exponents().at(i) != b.exponents().at(i)) {
        return Err(BatchError::ExponentMismatch {
            index,
            left: a.exponents().at(index),
            right: b.exponents().at(index),
        });
    }
    let (x, y) = (a.payload(), b.payload());
    let payload = backend.map(a.count(), |i| pk.mul_mod_n2(&x[i], &y[i]));
    Ok(CiphertextBatch {
        key: pk.id(),
        shape: a.shape(),
        exponents: a.exponents().clone(),
        payload,
    })
}

/// Adds plaintext values to ciphertexts. A plaintext element with a larger
/// exponent is rescaled down to the ciphertext's exponent first; a smaller one
/// would need a lossy ciphertext rescale and is rejected.
pub fn batch_add_plain(
    pk: &PublicKey,
    a: &CiphertextBatch,
    p: &PlaintextBatch,
    backend: &ExecutionBackend,
) -> Result<CiphertextBatch> {
    check_key(pk, a.key())?;
    check_key(pk, p.key())?;
    if a.shape() != p.shape() {
        return Err(BatchError::ShapeMismatch {
            left: a.shape(),
            right: p.shape(),
        });
    }
    let (x, m) = (a.payload(), p.mantissas());
    let payload = backend
        .try_map(a.count(), |i| {
            let (ce, pe) = (a.exponents().at(i), p.exponents().at(i));
            if pe < ce {
                return Err(BatchError::ExponentMismatch {
                    index: i,
                    left: ce,
                    right: pe,
                });
            }
            // equal exponents add the raw residue, which also admits masks
            // drawn from the whole of Z_n
            let aligned = if pe == ce {
                m[i].clone()
            } else {
                codec::rescale_mantissa(pk, &m[i], (pe - ce) as u32)
                    .map_err(|source| BatchError::Codec { index: i, source })?
            };
            // g^m = 1 + m·n; the sum inherits the ciphertext's randomness
            let gm = (BigUint::one() + aligned * pk.n()) % pk.n_squared();
            Ok(pk.mul_mod_n2(&x[i], &gm))
        })
        .map_err(|(_, e)| e)?;
    Ok(CiphertextBatch {
        key: pk.id(),
        shape: a.shape(),
        exponents: a.exponents().clone(),
        payload,
    })
}

/// How the plaintext operand of a product maps onto the other operand.
#[derive(Clone, Copy)]
enum Broadcast {
    Elementwise,
    Scalar,
    /// vector of length `cols` applied to every row
    Row { cols: usize },
}

fn broadcast(left: Shape, right: Shape) -> Result<Broadcast> {
    if left == right {
        return Ok(Broadcast::Elementwise);
    }
    if right.count() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if let (Shape::Matrix { cols, .. }, Shape::Vector(len)) = (left, right) {
        if len == cols {
            return Ok(Broadcast::Row { cols });
        }
    }
    Err(BatchError::ShapeMismatch { left, right })
}

impl Broadcast {
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Elementwise => i,
            Broadcast::Scalar => 0,
            Broadcast::Row { cols } => i % cols,
        }
    }
}

/// Raises each ciphertext to its plaintext scalar. Result exponents are sums.
/// `k` may match `a`'s shape, be a single element, or be a row vector applied
/// to every row of a matrix.
pub fn batch_mul_plain(
    pk: &PublicKey,
    a: &CiphertextBatch,
    k: &PlaintextBatch,
    backend: &ExecutionBackend,
) -> Result<CiphertextBatch> {
    check_key(pk, a.key())?;
    check_key(pk, k.key())?;
    let bc = broadcast(a.shape(), k.shape())?;
    let (x, m) = (a.payload(), k.mantissas());
    let payload = backend.map(a.count(), |i| pk.pow_mod_n2(&x[i], &m[bc.index(i)]));
    let exponents = match (a.exponents(), k.exponents()) {
        (Exponents::Shared(ea), Exponents::Shared(ek)) => Exponents::Shared(ea + ek),
        (ea, ek) => Exponents::PerElement((0..a.count()).map(|i| ea.at(i) + ek.at(bc.index(i))).collect()).normalized(),
    };
    Ok(CiphertextBatch {
        key: pk.id(),
        shape: a.shape(),
        exponents,
        payload,
    })
}

/// Homomorphic sum. `None` reduces everything to one element; for a matrix,
/// axis 0 sums down columns and axis 1 sums across rows. A vector accepts
/// axis 0 only, meaning the full reduction.
pub fn batch_sum(
    pk: &PublicKey,
    a: &CiphertextBatch,
    axis: Option<usize>,
    backend: &ExecutionBackend,
) -> Result<CiphertextBatch> {
    check_key(pk, a.key())?;
    let (rows, cols) = a.shape().as_matrix();
    let (groups, shape): (Vec<Vec<usize>>, Shape) = match (a.shape(), axis) {
        (_, None) | (Shape::Vector(_), Some(0)) => ((vec![(0..a.count()).collect()]), Shape::Vector(1)),
        (Shape::Matrix { .. }, Some(0)) => (
            (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect(),
            Shape::Vector(cols),
        ),
        (Shape::Matrix { .. }, Some(1)) => (
            (0..rows).map(|r| (0..cols).map(|c| r * cols + c).collect()).collect(),
            Shape::Vector(rows),
        ),
        _ => return Err(BatchError::Invalid("reduction axis out of range")),
    };
    let mut exponents = Vec::with_capacity(groups.len());
    for g in &groups {
        let e = match g.first() {
            Some(&i0) => a.exponents().at(i0),
            None => a.exponents().uniform().unwrap_or(0),
        };
        if g.iter().any(|&i| a.exponents().at(i) != e) {
            return Err(BatchError::MixedExponents);
        }
        exponents.push(e);
    }
    let x = a.payload();
    let operand_groups: Vec<Vec<BigUint>> = groups.iter().map(|g| g.iter().map(|&i| x[i].clone()).collect()).collect();
    // E(0) with r = 1 is the multiplicative identity
    let payload = backend.reduce_groups(operand_groups, BigUint::one(), |p, q| pk.mul_mod_n2(p, q));
    Ok(CiphertextBatch {
        key: pk.id(),
        shape,
        exponents: Exponents::PerElement(exponents).normalized(),
        payload,
    })
}

/// `a (k×m, or length m) × x (m×d)` with `a` encrypted. Each output element
/// is the tree-reduced product of `a[i][t]^x[t][j]` over `t`.
pub fn batch_matmul(
    pk: &PublicKey,
    a: &CiphertextBatch,
    x: &PlaintextBatch,
    backend: &ExecutionBackend,
) -> Result<CiphertextBatch> {
    check_key(pk, a.key())?;
    check_key(pk, x.key())?;
    let (k, m) = a.shape().as_matrix();
    let (xm, d) = match x.shape() {
        Shape::Matrix { rows, cols } => (rows, cols),
        Shape::Vector(len) => (len, 1),
    };
    if m != xm {
        return Err(BatchError::ShapeMismatch {
            left: a.shape(),
            right: x.shape(),
        });
    }
    let ea = a.exponents().uniform().or(if a.count() == 0 { Some(0) } else { None }).ok_or(BatchError::MixedExponents)?;
    let ex = x.exponents().uniform().or(if x.count() == 0 { Some(0) } else { None }).ok_or(BatchError::MixedExponents)?;

    let (c, w) = (a.payload(), x.mantissas());
    // products[(i·d + j)·m + t] = a[i][t]^x[t][j]
    let products = backend.map(k * d * m, |idx| {
        let t = idx % m;
        let j = (idx / m) % d;
        let i = idx / (m * d);
        pk.pow_mod_n2(&c[i * m + t], &w[t * d + j])
    });
    let mut products = products.into_iter();
    let groups: Vec<Vec<BigUint>> = (0..k * d).map(|_| products.by_ref().take(m).collect()).collect();
    let payload = backend.reduce_groups(groups, BigUint::one(), |p, q| pk.mul_mod_n2(p, q));
    let shape = match a.shape() {
        Shape::Vector(_) => Shape::Vector(d),
        Shape::Matrix { .. } => Shape::Matrix { rows: k, cols: d },
    };
    Ok(CiphertextBatch {
        key: pk.id(),
        shape,
        exponents: Exponents::Shared(ea + ex),
        payload,
    })
}

/// Plaintext × plaintext product on the encoding grid, with the same
/// broadcast rules as [`batch_mul_plain`].
pub fn plain_mul(pk: &PublicKey, a: &PlaintextBatch, b: &PlaintextBatch, backend: &ExecutionBackend) -> Result<PlaintextBatch> {
    check_key(pk, a.key())?;
    check_key(pk, b.key())?;
    let bc = broadcast(a.shape(), b.shape())?;
    let products = backend
        .try_map(a.count(), |i| codec::mul_encoded(pk, &a.element(i), &b.element(bc.index(i))))
        .map_err(|(index, source)| BatchError::Codec { index, source })?;
    let exponents = Exponents::PerElement(products.iter().map(|e| e.exponent).collect()).normalized();
    Ok(PlaintextBatch {
        key: pk.id(),
        shape: a.shape(),
        exponents,
        mantissas: products.into_iter().map(|e| e.mantissa).collect(),
    })
}

/// Re-randomizes every ciphertext with a fresh `r^n`; nonces are drawn in
/// index order.
pub fn batch_obfuscate<R: RngCore + ?Sized>(
    pk: &PublicKey,
    a: &CiphertextBatch,
    rng: &mut R,
    backend: &ExecutionBackend,
) -> Result<CiphertextBatch> {
    check_key(pk, a.key())?;
    let nonces: Vec<BigUint> = (0..a.count()).map(|_| pk.random_nonce(rng)).collect();
    let x = a.payload();
    let payload = backend.map(a.count(), |i| pk.mul_mod_n2(&x[i], &pk.pow_mod_n2(&nonces[i], pk.n())));
    Ok(CiphertextBatch {
        key: pk.id(),
        shape: a.shape(),
        exponents: a.exponents().clone(),
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::{keygen, seeded_rng, KeyPair};
    use proptest::prelude::*;

    fn tiny() -> KeyPair {
        KeyPair::from_primes(BigUint::from(5u32), BigUint::from(7u32)).unwrap()
    }

    fn key256() -> KeyPair {
        keygen(256, &mut seeded_rng(11)).unwrap()
    }

    fn backends() -> [ExecutionBackend; 3] {
        [ExecutionBackend::Naive, ExecutionBackend::parallel(3), ExecutionBackend::parallel(8)]
    }

    fn enc(kp: &KeyPair, v: &[f64], shape: Shape, exp: i32, seed: u64) -> CiphertextBatch {
        let p = PlaintextBatch::encode(&kp.public, v, shape, Some(exp)).unwrap();
        batch_encrypt(&kp.public, &p, &mut seeded_rng(seed), &ExecutionBackend::Naive).unwrap()
    }

    fn dec(kp: &KeyPair, c: &CiphertextBatch) -> Vec<f64> {
        batch_decrypt(&kp.private, c, &ExecutionBackend::Naive).unwrap().decode(&kp.public).unwrap()
    }

    #[test]
    fn fixed_nonce_matches_single_element_value() {
        let kp = tiny();
        let p = PlaintextBatch::new(&kp.public, Shape::Vector(1), Exponents::Shared(0), vec![BigUint::from(3u32)]).unwrap();
        let c = batch_encrypt_with_nonces(&kp.public, &p, &[BigUint::from(2u32)], &ExecutionBackend::Naive).unwrap();
        assert_eq!(c.payload(), &[BigUint::from(683u32)]);
        let back = batch_decrypt(&kp.private, &c, &ExecutionBackend::Naive).unwrap();
        assert_eq!(back.mantissas(), &[BigUint::from(3u32)]);
    }

    #[test]
    fn zeros_round_trip() {
        let kp = key256();
        let c = enc(&kp, &[0.0; 3], Shape::Vector(3), 0, 1);
        assert_eq!(dec(&kp, &c), vec![0.0; 3]);
    }

    #[test]
    fn add_examples() {
        let kp = key256();
        let pk = &kp.public;
        let b = ExecutionBackend::Naive;
        let a = enc(&kp, &[1.0, 2.0], Shape::Vector(2), 0, 1);
        let c = enc(&kp, &[3.0, 4.0], Shape::Vector(2), 0, 2);
        let z = enc(&kp, &[0.0, 0.0], Shape::Vector(2), 0, 3);
        assert_eq!(dec(&kp, &batch_add(pk, &a, &c, &b).unwrap()), vec![4.0, 6.0]);
        assert_eq!(dec(&kp, &batch_add(pk, &a, &z, &b).unwrap()), vec![1.0, 2.0]);
        assert_eq!(batch_add(pk, &a, &c, &b).unwrap(), batch_add(pk, &c, &a, &b).unwrap());
    }

    #[test]
    fn add_rejects_misaligned_ciphertexts() {
        let kp = key256();
        let pk = &kp.public;
        let a = enc(&kp, &[1.0, 2.0], Shape::Vector(2), 0, 1);
        let c = enc(&kp, &[1.0, 2.0], Shape::Vector(2), -1, 2);
        let err = batch_add(pk, &a, &c, &ExecutionBackend::Naive).unwrap_err();
        assert!(matches!(err, BatchError::ExponentMismatch { index: 0, .. }));
        let v3 = enc(&kp, &[1.0, 2.0, 3.0], Shape::Vector(3), 0, 2);
        assert!(matches!(batch_add(pk, &a, &v3, &ExecutionBackend::Naive), Err(BatchError::ShapeMismatch { .. })));
    }

    #[test]
    fn add_plain_aligns_plaintext_side() {
        let kp = key256();
        let pk = &kp.public;
        let a = enc(&kp, &[1.5, -2.25], Shape::Vector(2), -2, 1);
        let p = PlaintextBatch::encode(pk, &[1.0, 0.5], Shape::Vector(2), Some(-1)).unwrap();
        assert_eq!(dec(&kp, &batch_add_plain(pk, &a, &p, &ExecutionBackend::Naive).unwrap()), vec![2.5, -1.75]);
        let fine = PlaintextBatch::encode(pk, &[1.0, 0.5], Shape::Vector(2), Some(-3)).unwrap();
        assert!(batch_add_plain(pk, &a, &fine, &ExecutionBackend::Naive).is_err());
    }

    #[test]
    fn mul_plain_examples() {
        let kp = key256();
        let pk = &kp.public;
        let b = ExecutionBackend::Naive;
        let a = enc(&kp, &[1.0, 2.0, 3.0], Shape::Vector(3), 0, 1);
        let quarter = PlaintextBatch::scalar(pk, 0.25).unwrap();
        let r = batch_mul_plain(pk, &a, &quarter, &b).unwrap();
        assert_eq!(r.exponents(), &Exponents::Shared(-1));
        assert_eq!(dec(&kp, &r), vec![0.25, 0.5, 0.75]);
        let one = PlaintextBatch::scalar(pk, 1.0).unwrap();
        assert_eq!(dec(&kp, &batch_mul_plain(pk, &a, &one, &b).unwrap()), vec![1.0, 2.0, 3.0]);
        let zero = PlaintextBatch::scalar(pk, 0.0).unwrap();
        assert_eq!(dec(&kp, &batch_mul_plain(pk, &a, &zero, &b).unwrap()), vec![0.0; 3]);
        let neg = PlaintextBatch::scalar(pk, -2.0).unwrap();
        assert_eq!(dec(&kp, &batch_mul_plain(pk, &a, &neg, &b).unwrap()), vec![-2.0, -4.0, -6.0]);
    }

    #[test]
    fn mul_plain_row_broadcast() {
        let kp = key256();
        let pk = &kp.public;
        let a = enc(&kp, &[1.0, 2.0, 3.0, 4.0], Shape::Matrix { rows: 2, cols: 2 }, 0, 1);
        let row = PlaintextBatch::encode(pk, &[10.0, -1.0], Shape::Vector(2), Some(0)).unwrap();
        assert_eq!(dec(&kp, &batch_mul_plain(pk, &a, &row, &ExecutionBackend::Naive).unwrap()), vec![10.0, -2.0, 30.0, -4.0]);
        let bad = PlaintextBatch::encode(pk, &[1.0, 2.0, 3.0], Shape::Vector(3), Some(0)).unwrap();
        assert!(batch_mul_plain(pk, &a, &bad, &ExecutionBackend::Naive).is_err());
    }

    #[test]
    fn sum_examples() {
        let kp = key256();
        let pk = &kp.public;
        let b = ExecutionBackend::Naive;
        let a = enc(&kp, &[1.0, 2.0, 3.0, 4.0], Shape::Vector(4), 0, 1);
        let s = batch_sum(pk, &a, None, &b).unwrap();
        assert_eq!(s.shape(), Shape::Vector(1));
        assert_eq!(dec(&kp, &s), vec![10.0]);
        let single = enc(&kp, &[7.0], Shape::Vector(1), 0, 2);
        assert_eq!(batch_sum(pk, &single, None, &b).unwrap().payload(), single.payload());

        let m = a.clone().reshape(Shape::Matrix { rows: 2, cols: 2 }).unwrap();
        assert_eq!(dec(&kp, &batch_sum(pk, &m, Some(0), &b).unwrap()), vec![4.0, 6.0]);
        assert_eq!(dec(&kp, &batch_sum(pk, &m, Some(1), &b).unwrap()), vec![3.0, 7.0]);
        assert!(batch_sum(pk, &m, Some(2), &b).is_err());
    }

    #[test]
    fn sum_rejects_mixed_exponents() {
        let kp = key256();
        let pk = &kp.public;
        let a = enc(&kp, &[1.0, 2.0], Shape::Vector(2), 0, 1);
        let mixed = PlaintextBatch::new(pk, Shape::Vector(2), Exponents::PerElement(vec![0, -1]), vec![BigUint::one(); 2]).unwrap();
        let r = batch_mul_plain(pk, &a, &mixed, &ExecutionBackend::Naive).unwrap();
        assert!(matches!(batch_sum(pk, &r, None, &ExecutionBackend::Naive), Err(BatchError::MixedExponents)));
    }

    #[test]
    fn sum_order_does_not_matter() {
        let kp = key256();
        let pk = &kp.public;
        let a = enc(&kp, &[1.0, 2.0, 3.0, 4.0, 5.0], Shape::Vector(5), 0, 1);
        let tree = batch_sum(pk, &a, None, &ExecutionBackend::Naive).unwrap();
        let linear = a.payload().iter().fold(BigUint::one(), |acc, c| pk.mul_mod_n2(&acc, c));
        assert_eq!(tree.payload(), &[linear]);
    }

    #[test]
    fn matmul_examples() {
        let kp = key256();
        let pk = &kp.public;
        let b = ExecutionBackend::Naive;
        let a = enc(&kp, &[1.0, 2.0], Shape::Vector(2), 0, 1);
        let id = PlaintextBatch::encode(pk, &[1.0, 0.0, 0.0, 1.0], Shape::Matrix { rows: 2, cols: 2 }, Some(0)).unwrap();
        assert_eq!(dec(&kp, &batch_matmul(pk, &a, &id, &b).unwrap()), vec![1.0, 2.0]);
        let col = PlaintextBatch::encode(pk, &[3.0, 4.0], Shape::Matrix { rows: 2, cols: 1 }, Some(0)).unwrap();
        assert_eq!(dec(&kp, &batch_matmul(pk, &a, &col, &b).unwrap()), vec![11.0]);
        let wrong = PlaintextBatch::encode(pk, &[3.0, 4.0, 5.0], Shape::Matrix { rows: 3, cols: 1 }, Some(0)).unwrap();
        assert!(matches!(batch_matmul(pk, &a, &wrong, &b), Err(BatchError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_equals_broadcast_then_sum() {
        let kp = key256();
        let pk = &kp.public;
        let b = ExecutionBackend::Naive;
        let a = enc(&kp, &[0.5, -1.0, 2.0], Shape::Vector(3), -1, 4);
        let xs = [1.0, 2.0, 0.5, -3.0, 0.25, 4.0];
        let x = PlaintextBatch::encode(pk, &xs, Shape::Matrix { rows: 3, cols: 2 }, Some(-1)).unwrap();
        let mm = batch_matmul(pk, &a, &x, &b).unwrap();
        // column j of x as a vector, multiplied element-wise into a, then summed
        let xt = x.transpose();
        for j in 0..2 {
            let col = PlaintextBatch::new(pk, Shape::Vector(3), Exponents::Shared(-1), xt.mantissas()[j * 3..j * 3 + 3].to_vec()).unwrap();
            let s = batch_sum(pk, &batch_mul_plain(pk, &a, &col, &b).unwrap(), None, &b).unwrap();
            assert_eq!(s.payload()[0], mm.payload()[j]);
        }
        assert_eq!(dec(&kp, &mm), vec![0.5 - 0.5 + 0.5, 1.0 + 3.0 + 8.0]);
    }

    #[test]
    fn plain_mul_matches_float_product() {
        let kp = key256();
        let pk = &kp.public;
        let a = PlaintextBatch::encode(pk, &[0.5, -2.0, 3.0], Shape::Vector(3), Some(-2)).unwrap();
        let q = PlaintextBatch::scalar(pk, 0.25).unwrap();
        let r = plain_mul(pk, &a, &q, &ExecutionBackend::Naive).unwrap();
        assert_eq!(r.exponents(), &Exponents::Shared(-3));
        assert_eq!(r.decode(pk).unwrap(), vec![0.125, -0.5, 0.75]);
    }

    #[test]
    fn obfuscation_changes_ciphertext_not_plaintext() {
        let kp = key256();
        let a = enc(&kp, &[1.0, -2.0], Shape::Vector(2), 0, 1);
        let o = batch_obfuscate(&kp.public, &a, &mut seeded_rng(5), &ExecutionBackend::Naive).unwrap();
        assert_ne!(o.payload(), a.payload());
        assert_eq!(dec(&kp, &o), vec![1.0, -2.0]);
    }

    #[test]
    fn key_mismatch_is_rejected() {
        let kp = key256();
        let other = keygen(256, &mut seeded_rng(12)).unwrap();
        let a = enc(&kp, &[1.0], Shape::Vector(1), 0, 1);
        assert!(matches!(batch_decrypt(&other.private, &a, &ExecutionBackend::Naive), Err(BatchError::KeyMismatch { .. })));
    }

    #[test]
    fn backends_agree_bit_exactly() {
        let kp = key256();
        let pk = &kp.public;
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.75 - 4.0).collect();
        let p = PlaintextBatch::encode(pk, &vals, Shape::Matrix { rows: 3, cols: 4 }, Some(-2)).unwrap();
        let x = PlaintextBatch::encode(pk, &vals[..8], Shape::Matrix { rows: 4, cols: 2 }, Some(-1)).unwrap();
        let row = PlaintextBatch::encode(pk, &vals[..4], Shape::Vector(4), Some(-1)).unwrap();
        let mut reference = None;
        for b in backends() {
            let c = batch_encrypt(pk, &p, &mut seeded_rng(3), &b).unwrap();
            let out = (
                c.clone(),
                batch_add(pk, &c, &c, &b).unwrap(),
                batch_add_plain(pk, &c, &p, &b).unwrap(),
                batch_mul_plain(pk, &c, &row, &b).unwrap(),
                batch_sum(pk, &c, Some(0), &b).unwrap(),
                batch_sum(pk, &c, None, &b).unwrap(),
                batch_matmul(pk, &c, &x, &b).unwrap(),
                batch_obfuscate(pk, &c, &mut seeded_rng(4), &b).unwrap(),
                batch_decrypt(&kp.private, &c, &b).unwrap(),
                plain_mul(pk, &p, &row, &b).unwrap(),
            );
            match &reference {
                None => reference = Some(out),
                Some(r) => assert_eq!(r, &out, "{}", b.name()),
            }
        }
    }

    // Mantissas are drawn from a band that keeps every product and sum
    // clear of the overflow region of the n = 35 key.
    fn tiny_vec(len: usize) -> impl Strategy<Value = Vec<i64>> {
        prop::collection::vec(-1i64..=1, len)
    }

    fn mantissa(pk: &PublicKey, v: i64) -> BigUint {
        codec::from_signed(pk, v < 0, BigUint::from(v.unsigned_abs())).unwrap()
    }

    fn signed_value(pk: &PublicKey, m: &BigUint) -> i64 {
        let s = codec::signed(pk, m).unwrap();
        let mag = i64::try_from(s.magnitude).unwrap();
        if s.negative { -mag } else { mag }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tiny_key_ops_match_plain_integers(len in 1usize..=64, seed in any::<u64>(), data in tiny_vec(128)) {
            let kp = tiny();
            let pk = &kp.public;
            let b = ExecutionBackend::parallel(4);
            let xs = &data[..len];
            let ys = &data[64..64 + len];
            let mk = |v: &[i64]| PlaintextBatch::new(pk, Shape::Vector(v.len()), Exponents::Shared(0), v.iter().map(|&x| mantissa(pk, x)).collect()).unwrap();
            let (px, py) = (mk(xs), mk(ys));
            let mut rng = seeded_rng(seed);
            let cx = batch_encrypt(pk, &px, &mut rng, &b).unwrap();
            let cy = batch_encrypt(pk, &py, &mut rng, &b).unwrap();
            let open = |c: &CiphertextBatch| -> Vec<i64> {
                batch_decrypt(&kp.private, c, &b).unwrap().mantissas().iter().map(|m| signed_value(pk, m)).collect()
            };
            prop_assert_eq!(open(&cx), xs.to_vec());
            let sum: Vec<i64> = xs.iter().zip(ys).map(|(a, b)| a + b).collect();
            prop_assert_eq!(open(&batch_add(pk, &cx, &cy, &b).unwrap()), sum.clone());
            prop_assert_eq!(open(&batch_add_plain(pk, &cx, &py, &b).unwrap()), sum);
            let prod: Vec<i64> = xs.iter().zip(ys).map(|(a, b)| a * b).collect();
            prop_assert_eq!(open(&batch_mul_plain(pk, &cx, &py, &b).unwrap()), prod);
            // keep the full reduction inside the representable band of ±11
            let head = &xs[..len.min(11)];
            let ch = batch_encrypt(pk, &mk(head), &mut rng, &b).unwrap();
            prop_assert_eq!(open(&batch_sum(pk, &ch, None, &b).unwrap()), vec![head.iter().sum::<i64>()]);
        }

        #[test]
        fn encryption_is_deterministic_under_seed(seed in any::<u64>(), workers in 1usize..6) {
            let kp = tiny();
            let pk = &kp.public;
            let p = PlaintextBatch::new(pk, Shape::Vector(9), Exponents::Shared(0), (0..9u32).map(BigUint::from).collect()).unwrap();
            let a = batch_encrypt(pk, &p, &mut seeded_rng(seed), &ExecutionBackend::Naive).unwrap();
            let b = batch_encrypt(pk, &p, &mut seeded_rng(seed), &ExecutionBackend::parallel(workers)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
