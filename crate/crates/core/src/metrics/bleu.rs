use std::collections::HashMap;

use super::MetricsError;

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-4 with one reference per candidate and no smoothing.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus for n = 1..4. An order for which the candidates contain no n-grams
/// at all is left out of the geometric mean; any other order with zero
/// matches makes the score 0.
pub fn bleu4<C: AsRef<str>, R: AsRef<str>>(candidates: &[Vec<C>], references: &[Vec<R>]) -> Result<f64, MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matched[n - 1] += k.min(rc.get(&g).copied().unwrap_or(0));
                possible[n - 1] += k;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if possible[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / possible[n] as f64).ln();
        orders += 1;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}
