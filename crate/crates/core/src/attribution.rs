//! Integrated gradients over token embeddings with a zero baseline.

use crate::model::{self, Encoded, ModelError, ModelParams};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    /// `T × d`, row-major.
    pub raw: Vec<f64>,
    pub embed_dim: usize,
    /// Per-token L1 mass, L2-normalized over the sequence.
    pub per_token: Vec<f64>,
    pub m_used: usize,
    pub target_class: usize,
}

impl AttributionVector {
    pub fn len(&self) -> usize {
        self.per_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token.is_empty()
    }

    pub fn raw_sum(&self) -> f64 {
        self.raw.iter().sum()
    }
}

/// L1 over each row, then L2 normalization; an all-zero input stays zero.
pub fn summarize(raw: &[f64], embed_dim: usize) -> Vec<f64> {
    let mut w: Vec<f64> = raw
        .chunks(embed_dim)
        .map(|row| row.iter().map(|v| v.abs()).sum())
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        w.iter_mut().for_each(|v| *v /= norm);
    }
    w
}

/// `(x − 0) ⊙ (1/m) Σ_{k=1..m} ∇_x f_y(k/m · x)` where `f_y` is the logit of `target_class`.
pub fn integrated_gradients(
    params: &ModelParams,
    input: &Encoded,
    target_class: usize,
    m: usize,
) -> Result<AttributionVector, ModelError> {
    if m < 1 {
        return Err(ModelError::InvalidArgument("m must be >= 1".into()));
    }
    let c = params.config.num_classes;
    if target_class >= c {
        return Err(ModelError::InvalidArgument(format!(
            "target class {target_class} out of range for {c} classes"
        )));
    }
    let x = model::forward(params, input)?.embeddings;
    let mut onehot = vec![0.0; c];
    onehot[target_class] = 1.0;
    let mut acc = vec![0.0; x.len()];
    for k in 1..=m {
        let alpha = k as f64 / m as f64;
        let xk: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let tr = model::forward_embedded(params, xk, input.target)?;
        let g = model::input_gradient(params, &tr, &onehot);
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi;
        }
    }
    let raw: Vec<f64> = acc
        .iter()
        .zip(&x)
        .map(|(a, xi)| xi * a / m as f64)
        .collect();
    let d = params.config.embed_dim;
    Ok(AttributionVector {
        per_token: summarize(&raw, d),
        raw,
        embed_dim: d,
        m_used: m,
        target_class,
    })
}

/// Indices of the `n` heaviest tokens, heaviest first; ties go to the lower index.
pub fn top_n_tokens(attr: &AttributionVector, n: usize) -> Result<Vec<usize>, ModelError> {
    let t = attr.per_token.len();
    if n < 1 || n > t {
        return Err(ModelError::InvalidArgument(format!("n={n} outside 1..={t}")));
    }
    let mut idx: Vec<usize> = (0..t).collect();
    idx.sort_by(|&a, &b| {
        attr.per_token[b]
            .total_cmp(&attr.per_token[a])
            .then(a.cmp(&b))
    });
    idx.truncate(n);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub sample_id: String,
    pub target: Option<usize>,
    pub m: usize,
    pub per_token: Vec<f64>,
}

pub fn write_attributions<W: Write>(records: &[AttributionRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_attributions<R: BufRead>(r: R) -> std::io::Result<Vec<AttributionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Task;
    use crate::model::{init_params, Activation, ModelConfig};

    fn cfg(task: Task, act: Activation) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            hidden_dim: 6,
            head_dim: 3,
            num_classes: task.num_classes(),
            task,
            bias_dim: 2,
            activation: act,
        }
    }

    fn enc(ids: &[usize], target: Option<usize>) -> Encoded {
        Encoded {
            ids: ids.to_vec(),
            target,
        }
    }

    fn logit(p: &ModelParams, x: Vec<f64>, target: Option<usize>, y: usize) -> f64 {
        model::forward_embedded(p, x, target).unwrap().logits[y]
    }

    #[test]
    fn linear_probe_is_exact_at_one_step() {
        let p = init_params(&cfg(Task::TypeInf, Activation::Identity), 3).unwrap();
        let e = enc(&[1, 4, 7, 2], Some(2));
        let a = integrated_gradients(&p, &e, 1, 1).unwrap();
        let x = model::gather(&p, &e.ids);
        let n = x.len();
        let delta = logit(&p, x, e.target, 1) - logit(&p, vec![0.0; n], e.target, 1);
        assert!((a.raw_sum() - delta).abs() <= 1e-10);
        let a5 = integrated_gradients(&p, &e, 1, 5).unwrap();
        for (u, v) in a.raw.iter().zip(&a5.raw) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn completeness_on_tanh_model() {
        let p = init_params(&cfg(Task::VulnDet, Activation::Tanh), 4).unwrap();
        let e = enc(&[1, 2, 3, 9, 9], None);
        let a = integrated_gradients(&p, &e, 0, 300).unwrap();
        let x = model::gather(&p, &e.ids);
        let n = x.len();
        let delta = logit(&p, x, None, 0) - logit(&p, vec![0.0; n], None, 0);
        assert!((a.raw_sum() - delta).abs() <= 1e-3 * delta.abs().max(1e-6));
    }

    #[test]
    fn zero_input_gives_zero_attribution() {
        let mut p = init_params(&cfg(Task::VulnDet, Activation::Tanh), 5).unwrap();
        p.embedding.data.iter_mut().for_each(|v| *v = 0.0);
        let a = integrated_gradients(&p, &enc(&[1, 2], None), 1, 10).unwrap();
        assert!(a.raw.iter().all(|&v| v == 0.0));
        assert_eq!(a.per_token, vec![0.0, 0.0]);
    }

    #[test]
    fn per_token_is_unit_and_nonnegative() {
        let p = init_params(&cfg(Task::VulnDet, Activation::Tanh), 6).unwrap();
        let a = integrated_gradients(&p, &enc(&[3, 1, 4, 1, 5], None), 1, 20).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.per_token.iter().all(|&v| v >= 0.0));
        let norm: f64 = a.per_token.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let scaled: Vec<f64> = a.raw.iter().map(|v| v * 3.5).collect();
        let s = summarize(&scaled, 4);
        for (u, v) in s.iter().zip(&a.per_token) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_arguments() {
        let p = init_params(&cfg(Task::VulnDet, Activation::Tanh), 7).unwrap();
        let e = enc(&[1, 2], None);
        assert!(integrated_gradients(&p, &e, 0, 0).is_err());
        assert!(integrated_gradients(&p, &e, 2, 5).is_err());
    }

    #[test]
    fn top_n_ordering_and_ties() {
        let a = AttributionVector {
            raw: vec![],
            embed_dim: 1,
            per_token: vec![0.1, 0.5, 0.5, 0.0, 0.7],
            m_used: 1,
            target_class: 0,
        };
        assert_eq!(top_n_tokens(&a, 3).unwrap(), vec![4, 1, 2]);
        assert_eq!(top_n_tokens(&a, 5).unwrap().len(), 5);
        assert!(top_n_tokens(&a, 0).is_err());
        assert!(top_n_tokens(&a, 6).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let recs = vec![AttributionRecord {
            sample_id: "p0-s1".into(),
            target: Some(3),
            m: 50,
            per_token: vec![0.6, 0.8],
        }];
        let mut buf = Vec::new();
        write_attributions(&recs, &mut buf).unwrap();
        assert_eq!(read_attributions(&buf[..]).unwrap(), recs);
    }
}
