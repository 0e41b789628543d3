//! Exact-match METEOR.
//!
//! Tokenization lowercases and splits on any non-alphanumeric character.
//! Alignment is exact-match unigram matching, greedy left-to-right over the
//! candidate, preferring the reference position that continues the current
//! run and falling back to the earliest unmatched occurrence. With
//! P = m/|cand| and R = m/|ref|:
//!
//!   F = 10·P·R / (R + 9·P)
//!   penalty = 0.5 · (chunks / m)³
//!   score = F · (1 − penalty),   0 when m = 0
//!
//! where chunks is the number of runs contiguous in both strings. No
//! stemming or synonymy: absolute scores differ from lexicon-backed METEOR
//! implementations.

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Candidate position → reference position for each matched candidate token.
fn align(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut taken = vec![false; reference.len()];
    let mut alignment = Vec::new();
    let mut previous_ref: Option<usize> = None;
    for (ci, token) in candidate.iter().enumerate() {
        // prefer the in-order continuation of the current run
        let continuation = previous_ref
            .map(|p| p + 1)
            .filter(|&next| next < reference.len() && !taken[next] && &reference[next] == token);
        let chosen = continuation.or_else(|| {
            reference
                .iter()
                .enumerate()
                .find(|(ri, t)| !taken[*ri] && *t == token)
                .map(|(ri, _)| ri)
        });
        if let Some(ri) = chosen {
            taken[ri] = true;
            alignment.push((ci, ri));
            previous_ref = Some(ri);
        }
    }
    alignment
}

/// Number of runs contiguous in both candidate and reference order.
fn chunk_count(alignment: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut previous: Option<(usize, usize)> = None;
    for &(ci, ri) in alignment {
        let continues = previous.is_some_and(|(pc, pr)| ci == pc + 1 && ri == pr + 1);
        if !continues {
            chunks += 1;
        }
        previous = Some((ci, ri));
    }
    chunks
}

/// METEOR score of a candidate against one reference, in [0, 1].
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let candidate = tokenize(candidate);
    let reference = tokenize(reference);
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let alignment = align(&candidate, &reference);
    let matches = alignment.len();
    if matches == 0 {
        return 0.0;
    }
    let precision = matches as f64 / candidate.len() as f64;
    let recall = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let fragmentation = chunk_count(&alignment) as f64 / matches as f64;
    let penalty = 0.5 * fragmentation.powi(3);
    f_mean * (1.0 - penalty)
}
