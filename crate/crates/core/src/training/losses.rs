use crate::numerics::{log1mexp, Graph, NumericsError, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Probability clamp used by every binary cross-entropy term.
pub const PROB_EPS: f64 = 1e-7;

/// Rows `logp[r, targets[r]]` as a column.
pub fn pick(g: &mut Graph, logp: Var, targets: &[usize]) -> Result<Var> {
    let (rows, cols) = (g.value(logp).rows(), g.value(logp).cols());
    if targets.len() != rows {
        return Err(NumericsError::Invalid(format!(
            "{} targets for {rows} rows",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
        return Err(NumericsError::IndexOutOfRange {
            index: t,
            len: cols,
        });
    }
    let flat = g.reshape(logp, &[rows * cols, 1])?;
    let idx: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| r * cols + t)
        .collect();
    g.gather_rows(flat, &idx)
}

/// Mean binary cross-entropy of probabilities `p` (a column) against `target`.
pub fn loss_boundary(g: &mut Graph, p: Var, target: &[bool]) -> Result<Var> {
    let n = g.value(p).numel();
    if n != target.len() {
        return Err(NumericsError::Invalid(format!(
            "{n} scores for {} targets",
            target.len()
        )));
    }
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus = g.neg(p)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let lp = g.log(p)?;
    let lq = g.log(one_minus)?;
    let m: Vec<f64> = target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let mv = g.constant(Tensor::new(g.value(lp).shape().to_vec(), m.clone())?);
    let inv = g.constant(Tensor::new(
        g.value(lp).shape().to_vec(),
        m.iter().map(|x| 1.0 - x).collect(),
    )?);
    let a = g.mul(lp, mv)?;
    let b = g.mul(lq, inv)?;
    let s = g.add(a, b)?;
    let mean = g.mean_all(s)?;
    g.neg(mean)
}

/// Mean squared error between `student` and a fixed `teacher` tensor.
pub fn loss_encoder(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

/// Mean next-symbol negative log-likelihood.
pub fn loss_ce(g: &mut Graph, logp: Var, targets: &[usize]) -> Result<Var> {
    let picked = pick(g, logp, targets)?;
    let mean = g.mean_all(picked)?;
    g.neg(mean)
}

/// Temperature-modulated binary cross-entropy between log-probabilities,
/// evaluated in log space.
pub fn f_temp_bce(student_logp: f64, teacher_logp: f64, tau: f64) -> f64 {
    let a = student_logp / tau;
    let y = (teacher_logp / tau).exp();
    let rest = if y < 1.0 {
        (1.0 - y) * log1mexp(a.min((1.0 - PROB_EPS).ln()))
    } else {
        0.0
    };
    -(y * a + rest)
}

/// [`f_temp_bce`] summed over a column of student log-likelihoods.
pub fn f_temp_bce_graph(
    g: &mut Graph,
    student_logp: Var,
    teacher_logp: &[f64],
    tau: f64,
) -> Result<Var> {
    let shape = g.value(student_logp).shape().to_vec();
    if g.value(student_logp).numel() != teacher_logp.len() {
        return Err(NumericsError::Invalid(
            "student/teacher length mismatch".into(),
        ));
    }
    let y: Vec<f64> = teacher_logp.iter().map(|&t| (t / tau).exp()).collect();
    let a = g.scale(student_logp, 1.0 / tau)?;
    let capped = g.clamp(a, f64::NEG_INFINITY, (1.0 - PROB_EPS).ln())?;
    let l1m = g.log1mexp(capped)?;
    let yv = g.constant(Tensor::new(shape.clone(), y.clone())?);
    let ry = g.constant(Tensor::new(shape, y.iter().map(|v| 1.0 - v).collect())?);
    let t1 = g.mul(a, yv)?;
    let t2 = g.mul(l1m, ry)?;
    let s = g.add(t1, t2)?;
    let total = g.sum_all(s)?;
    g.neg(total)
}

/// Per-patch log-likelihoods: row `i` sums picked log-probabilities over
/// `spans[i] = (start, end)` (end exclusive).
pub fn segment_sums(g: &mut Graph, picked: Var, spans: &[(usize, usize)]) -> Result<Var> {
    let n = g.value(picked).rows();
    let mut s = vec![0.0; spans.len() * n];
    for (i, &(a, b)) in spans.iter().enumerate() {
        if a >= b || b > n {
            return Err(NumericsError::Invalid(format!(
                "bad span {a}..{b} over {n} rows"
            )));
        }
        s[i * n + a..i * n + b].iter_mut().for_each(|v| *v = 1.0);
    }
    let sm = g.constant(Tensor::matrix(spans.len(), n, s));
    g.matmul(sm, picked)
}

/// Distillation loss averaged over patches: student patch log-likelihoods
/// (sums of fused log-probabilities over each patch) against teacher token
/// log-likelihoods.
pub fn loss_distill(
    g: &mut Graph,
    logp: Var,
    targets: &[usize],
    spans: &[(usize, usize)],
    teacher_logp: &[f64],
    tau: f64,
) -> Result<(Var, Var)> {
    if spans.len() != teacher_logp.len() || spans.is_empty() {
        return Err(NumericsError::Invalid(format!(
            "{} patches for {} teacher tokens",
            spans.len(),
            teacher_logp.len()
        )));
    }
    let picked = pick(g, logp, targets)?;
    let student = segment_sums(g, picked, spans)?;
    let total = f_temp_bce_graph(g, student, teacher_logp, tau)?;
    Ok((g.scale(total, 1.0 / spans.len() as f64)?, student))
}

/// Patch spans over byte rows from BOS-prefixed patch ends: patch `i >= 1`
/// covers bytes `ends[i-1]..ends[i]`.
pub fn patch_spans(ends: &[usize]) -> Vec<(usize, usize)> {
    ends.windows(2).map(|w| (w[0], w[1])).collect()
}
