//! Slow reference implementations and finite-difference checking.
//!
//! Everything here is written with explicit index loops over plain slices and
//! deliberately avoids the kernels and graph ops it is used to verify.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::outlook::{OutlookLayer, SoftmaxScope};
use crate::params::{ParameterStore, Session};
use crate::tensor::{Tensor, TensorError};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

/// Outcome of comparing two tensors (or gradients) element by element.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub op: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub worst_index: usize,
    pub elements: usize,
    pub pass: bool,
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Relative differences only count where the absolute difference exceeds
/// `floor`.
fn scan(op: &str, a: &[f64], b: &[f64], floor: f64) -> DiffReport {
    let mut report = DiffReport {
        op: op.to_string(),
        max_abs: 0.0,
        max_rel: 0.0,
        worst_index: 0,
        elements: a.len(),
        pass: true,
    };
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let d = (x - y).abs();
        if d > report.max_abs || d.is_nan() {
            report.max_abs = d;
            report.worst_index = i;
        }
        if d > floor || d.is_nan() {
            report.max_rel = report.max_rel.max(rel(x, y));
        }
    }
    report
}

/// Elementwise comparison; passes iff `max_abs ≤ tol` or `max_rel ≤ tol`.
pub fn equivalence_report(name: &str, a: &Tensor, b: &Tensor, tol: f64) -> Result<DiffReport, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "equivalence_report",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut report = scan(name, a.data(), b.data(), 0.0);
    report.pass = report.max_abs <= tol || report.max_rel <= tol;
    Ok(report)
}

/// Gradient comparison: every element must satisfy
/// `|a − n| ≤ max(1e-8, 1e-5 · max(|a|, |n|))`.
pub fn gradient_report(name: &str, analytic: &[f64], numeric: &[f64]) -> DiffReport {
    let mut report = scan(name, analytic, numeric, GRAD_ABS_FLOOR);
    report.pass = analytic.len() == numeric.len()
        && analytic.iter().zip(numeric).all(|(&a, &n)| {
            (a - n).abs() <= GRAD_ABS_FLOOR.max(GRAD_REL_TOL * a.abs().max(n.abs()))
        });
    report
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// Checks autodiff gradients of a scalar loss against finite differences for
/// every scalar of every parameter in `store`.
pub fn gradcheck<F>(name: &str, store: &ParameterStore, build: F) -> Result<DiffReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store);
        let loss = build(&mut s)?;
        s.backward(loss)?;
        s.take_grads()
    };
    let eval = |st: &ParameterStore| -> Result<f64> {
        let mut s = Session::new(st);
        let loss = build(&mut s)?;
        Ok(s.graph.value(loss).item())
    };
    let mut probe = store.clone();
    let (mut a_all, mut n_all) = (Vec::new(), Vec::new());
    for (pname, grad) in analytic {
        for (i, &gi) in grad.iter().enumerate() {
            let orig = store.get(&pname).unwrap().data()[i];
            probe.get_mut(&pname).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(&pname).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(&pname).unwrap().data_mut()[i] = orig;
            a_all.push(gi);
            n_all.push((up - down) / (2.0 * FD_STEP));
        }
    }
    if a_all.is_empty() {
        return Err(Error::Invalid(format!("{name}: loss depends on no parameters")));
    }
    Ok(gradient_report(name, &a_all, &n_all))
}

/// Aligned text table of reports.
pub fn format_table(reports: &[DiffReport]) -> String {
    let width = reports.iter().map(|r| r.op.len()).max().unwrap_or(2).max(2);
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>8}  {:>8}  {}\n",
        "op", "max_abs", "max_rel", "worst", "elems", "result"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>12.3e}  {:>8}  {:>8}  {}\n",
            r.op,
            r.max_abs,
            r.max_rel,
            r.worst_index,
            r.elements,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}

/// One JSON object per line.
pub fn format_json_lines(reports: &[DiffReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serialises") + "\n")
        .collect()
}

// ---- brute-force references ---------------------------------------------

/// Triple-loop `[m×k]·[k×n]`.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k, "inner dimensions differ");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new([m, n], out).expect("non-empty product")
}

/// `ReLU` of a valid-mode 2-D convolution over `x` zero-padded by 2 on
/// every side. `kernel: [w×(H+4)×filters]`, `x: [L×H]`, result
/// `[(L+5−w)×filters]`.
pub fn naive_conv_branch(kernel: &Tensor, bias: &Tensor, x: &Tensor) -> Tensor {
    let (w, hp, filters) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let (len, hidden) = (x.shape()[0], x.shape()[1]);
    assert_eq!(hp, hidden + 4, "kernel width must cover the padded hidden axis");
    let padded = |row: isize, col: isize| -> f64 {
        let (r, c) = (row - 2, col - 2);
        if r < 0 || c < 0 || r as usize >= len || c as usize >= hidden {
            0.0
        } else {
            x.data()[r as usize * hidden + c as usize]
        }
    };
    let out_len = len + 5 - w;
    let mut out = vec![0.0; out_len * filters];
    for t in 0..out_len {
        for f in 0..filters {
            let mut acc = bias.data()[f];
            for a in 0..w {
                for c in 0..hp {
                    acc += kernel.data()[(a * hp + c) * filters + f] * padded((t + a) as isize, c as isize);
                }
            }
            out[t * filters + f] = acc.max(0.0);
        }
    }
    Tensor::new([out_len, filters], out).expect("non-empty conv output")
}

fn naive_layer_norm(x: &[f64], rows: usize, cols: usize, gain: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let mut mean = 0.0;
        for c in 0..cols {
            mean += x[r * cols + c];
        }
        mean /= cols as f64;
        let mut var = 0.0;
        for c in 0..cols {
            let d = x[r * cols + c] - mean;
            var += d * d;
        }
        var /= cols as f64;
        let denom = (var + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (x[r * cols + c] - mean) / denom * gain[c] + shift[c];
        }
    }
    out
}

fn naive_linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.data()[o];
            for i in 0..din {
                acc += x[r * din + i] * w.data()[i * dout + o];
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

/// Every intermediate of the reference outlook layer.
#[derive(Debug, Clone)]
pub struct OutlookReference {
    /// `[L×K×K×F]` normalised weights; zero for invalid sources and for
    /// windows anchored on padding.
    pub weights: Vec<f64>,
    /// Folded attention output `[L×F]` (before residual).
    pub attended: Tensor,
    /// Full layer output `[L×F]`.
    pub output: Tensor,
}

/// Literal per-index evaluation of one outlook layer.
pub fn naive_outlook_reference(
    layer: &OutlookLayer,
    store: &ParameterStore,
    x: &Tensor,
    mask: &[bool],
) -> OutlookReference {
    let p = |name: &str| store.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let (len, ch, k) = (x.shape()[0], layer.channels, layer.kernel);
    let half = (k / 2) as isize;
    let source = |i: usize, r: usize| -> Option<usize> {
        let pos = i as isize + r as isize - half;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    };

    let normed = naive_layer_norm(
        x.data(),
        len,
        ch,
        p(&layer.pre_norm.gain).data(),
        p(&layer.pre_norm.shift).data(),
        layer.pre_norm.eps,
    );
    let values = naive_linear(&normed, len, p(&layer.value_proj.weight), p(&layer.value_proj.bias));
    let logits = naive_linear(&normed, len, p(&layer.attn_proj.weight), p(&layer.attn_proj.bias));
    let at = |i: usize, j: usize, r: usize, f: usize| ((i * k + j) * k + r) * ch + f;
    let valid = |i: usize, r: usize| source(i, r).is_some_and(|s| mask[s]);

    let mut weights = vec![0.0; len * k * k * ch];
    for i in 0..len {
        if !mask[i] {
            continue;
        }
        for j in 0..k {
            match layer.scope {
                SoftmaxScope::PerChannel => {
                    for f in 0..ch {
                        let mut top = f64::NEG_INFINITY;
                        for r in 0..k {
                            if valid(i, r) {
                                top = top.max(logits[at(i, j, r, f)]);
                            }
                        }
                        let mut total = 0.0;
                        for r in 0..k {
                            if valid(i, r) {
                                total += (logits[at(i, j, r, f)] - top).exp();
                            }
                        }
                        for r in 0..k {
                            if valid(i, r) {
                                weights[at(i, j, r, f)] = (logits[at(i, j, r, f)] - top).exp() / total;
                            }
                        }
                    }
                }
                SoftmaxScope::Flattened => {
                    let mut top = f64::NEG_INFINITY;
                    for r in 0..k {
                        for f in 0..ch {
                            if valid(i, r) {
                                top = top.max(logits[at(i, j, r, f)]);
                            }
                        }
                    }
                    let mut total = 0.0;
                    for r in 0..k {
                        for f in 0..ch {
                            if valid(i, r) {
                                total += (logits[at(i, j, r, f)] - top).exp();
                            }
                        }
                    }
                    for r in 0..k {
                        for f in 0..ch {
                            if valid(i, r) {
                                weights[at(i, j, r, f)] = (logits[at(i, j, r, f)] - top).exp() / total;
                            }
                        }
                    }
                }
            }
        }
    }

    // Each anchor's window row j lands on position source(i, j).
    let mut attended = vec![0.0; len * ch];
    for i in 0..len {
        for j in 0..k {
            let Some(target) = source(i, j) else { continue };
            for f in 0..ch {
                let mut acc = 0.0;
                for r in 0..k {
                    if let Some(src) = source(i, r) {
                        acc += weights[at(i, j, r, f)] * values[src * ch + f];
                    }
                }
                attended[target * ch + f] += acc;
            }
        }
    }

    let mut hidden = vec![0.0; len * ch];
    for t in 0..len * ch {
        hidden[t] = attended[t] + x.data()[t];
    }
    let normed = naive_layer_norm(
        &hidden,
        len,
        ch,
        p(&layer.mlp_norm.gain).data(),
        p(&layer.mlp_norm.shift).data(),
        layer.mlp_norm.eps,
    );
    let mlp = naive_linear(&normed, len, p(&layer.mlp.weight), p(&layer.mlp.bias));
    let output: Vec<f64> = (0..len * ch).map(|t| mlp[t] + hidden[t]).collect();

    OutlookReference {
        weights,
        attended: Tensor::new([len, ch], attended).expect("non-empty"),
        output: Tensor::new([len, ch], output).expect("non-empty"),
    }
}

/// How many centred windows of size `k` cover each of `len` positions.
pub fn coverage_count(len: usize, k: usize) -> Vec<usize> {
    let half = k / 2;
    (0..len)
        .map(|i| {
            let mut n = 0;
            for anchor in 0..len {
                if anchor.abs_diff(i) <= half {
                    n += 1;
                }
            }
            n
        })
        .collect()
}

/// Best `(start, end, score)` over every ordered pair of candidate
/// positions (excluding the null slot 0) with `end − start ≤ max_len`.
/// Ties go to the pair found first in `(start, end)` order.
pub fn exhaustive_span_search(
    start: &[f64],
    end: &[f64],
    candidates: &[bool],
    max_len: usize,
) -> Option<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for s in 0..start.len() {
        for e in 0..end.len() {
            if s >= 1 && s <= e && e - s <= max_len && candidates[s] && candidates[e] {
                pairs.push((s, e, start[s] + end[e]));
            }
        }
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for p in pairs {
        match best {
            Some(b) if b.2 >= p.2 => {}
            _ => best = Some(p),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn fd_of_sum_of_squares() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let g = finite_difference_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, FD_STEP);
        assert!((g.data()[0] - 2.0).abs() < 1e-9);
        assert!((g.data()[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn fd_of_softmax_sum_vanishes() {
        let x = Tensor::vector(&[0.3, -1.2, 2.0, 0.0]);
        let g = finite_difference_gradient(
            |t| {
                let mut graph = Graph::new();
                let v = graph.constant(t.clone());
                let s = graph.softmax(v, 0, None).unwrap();
                graph.value(s).data().iter().sum()
            },
            &x,
            FD_STEP,
        );
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn identical_tensors_pass() {
        let a = Tensor::vector(&[1.0, -2.0, 3.0]);
        let r = equivalence_report("same", &a, &a, 0.0).unwrap();
        assert_eq!((r.max_abs, r.max_rel, r.pass), (0.0, 0.0, true));
    }

    #[test]
    fn perturbed_element_is_located() {
        let a = Tensor::vector(&[1.0, 2.0, 3.0, 4.0]);
        let mut b = a.clone();
        b.data_mut()[2] += 0.5;
        let r = equivalence_report("bump", &a, &b, 1e-3).unwrap();
        assert_eq!(r.worst_index, 2);
        assert!((r.max_abs - 0.5).abs() < 1e-15);
        assert!(!r.pass);
    }

    #[test]
    fn tolerance_is_abs_or_rel() {
        // Large values: abs diff 1, rel diff 1e-6.
        let a = Tensor::vector(&[1e6]);
        let b = Tensor::vector(&[1e6 + 1.0]);
        assert!(equivalence_report("rel", &a, &b, 1e-5).unwrap().pass);
        // Tiny values: rel diff 1, abs diff 1e-12.
        let a = Tensor::vector(&[1e-12]);
        let b = Tensor::vector(&[0.0]);
        assert!(equivalence_report("abs", &a, &b, 1e-10).unwrap().pass);
        assert!(equivalence_report("shape", &a, &Tensor::vector(&[0.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn naive_matmul_by_hand() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(naive_matmul(&a, &b).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn coverage_counts() {
        assert_eq!(coverage_count(3, 3), vec![2, 3, 2]);
        assert_eq!(coverage_count(1, 5), vec![1]);
        assert_eq!(coverage_count(4, 1), vec![1; 4]);
    }

    #[test]
    fn exhaustive_search_respects_length_and_candidates() {
        let start = [9.0, 0.0, 1.0, 5.0];
        let end = [9.0, 3.0, 0.0, 0.0];
        assert_eq!(exhaustive_span_search(&start, &end, &[true; 4], 3), Some((3, 3, 5.0)));
        assert_eq!(exhaustive_span_search(&start, &end, &[true, true, true, false], 3), Some((1, 1, 3.0)));
        assert_eq!(exhaustive_span_search(&start, &end, &[true, false, false, false], 3), None);
    }
}
