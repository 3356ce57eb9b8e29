/// Best-path decoding: per-frame argmax, merge adjacent repeats, drop
/// blanks. `log_probs` is row-major `T×C`.
pub fn greedy_decode(log_probs: &[f64], classes: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.chunks(classes) {
        // first maximum wins ties
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
