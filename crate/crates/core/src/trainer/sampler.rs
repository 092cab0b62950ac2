//! Stratified batch order: every class is spread evenly over the epoch so
//! each batch sees the class mix of the whole dataset.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Batches of sample indices covering `0..labels.len()` exactly once.
///
/// Classes are shuffled independently and interleaved by their relative
/// position; a trailing batch with a single sample joins the previous one.
pub fn stratified_batches(labels: &[u8], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 training samples, got {n}")));
    }
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &y) in labels.iter().enumerate() {
        classes[y as usize].push(i);
    }
    let mut keyed = Vec::with_capacity(n);
    for (c, members) in classes.iter_mut().enumerate() {
        members.shuffle(rng);
        let len = members.len() as f64;
        for (r, &i) in members.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / len, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    Ok(batches)
}

/// Number of batches [`stratified_batches`] produces.
pub fn batch_count(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    match n % batch_size {
        0 => full,
        1 if full > 0 => full,
        _ => full + 1,
    }
}
