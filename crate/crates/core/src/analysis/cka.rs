use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn centered(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::dim("linear_cka", x.shape(), &[2]));
    }
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let mut means = vec![0.0; p];
    for i in 0..n {
        means.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let data = (0..n)
        .flat_map(|i| x.row(i).iter().zip(&means).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    Tensor::new(vec![n, p], data)
}

fn frobenius_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two representations of the same
/// `n` samples: `|Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F)` after column centering.
/// Zero when either representation is constant.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::dim("linear_cka", x.shape(), y.shape()));
    }
    if x.shape()[0] < 2 {
        return Err(Error::Contract("linear_cka needs at least 2 samples".into()));
    }
    let xc = centered(x)?;
    let yc = centered(y)?;
    let xt = xc.transpose()?;
    let yt = yc.transpose()?;
    let cross = frobenius_sq(&yt.matmul(&xc)?);
    let xx = frobenius_sq(&xt.matmul(&xc)?).sqrt();
    let yy = frobenius_sq(&yt.matmul(&yc)?).sqrt();
    let denom = xx * yy;
    if denom <= f64::MIN_POSITIVE || !denom.is_finite() {
        return Ok(0.0);
    }
    Ok((cross / denom).clamp(0.0, 1.0))
}

/// Pairwise CKA matrix over a list of representations.
pub fn cka_matrix(reps: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let k = reps.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in i + 1..k {
            let v = linear_cka(&reps[i], &reps[j])?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Mean of the off-diagonal entries; `None` for fewer than two layers.
pub fn mean_off_diagonal(m: &[Vec<f64>]) -> Option<f64> {
    let k = m.len();
    if k < 2 {
        return None;
    }
    let sum: f64 = (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j]).sum();
    Some(sum / (k * (k - 1)) as f64)
}
