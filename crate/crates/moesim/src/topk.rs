//! Shared top-k index selection with the crate-wide tie rule.

/// Indices of the `k` largest values, ordered by descending value with ties
/// broken toward the lower index. `k` is clamped to `values.len()`.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    order.truncate(k.min(values.len()));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.5], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.1, 0.6, 0.3], 2), vec![1, 2]);
    }

    #[test]
    fn k_larger_than_len_is_clamped() {
        assert_eq!(top_k_indices(&[1.0, 2.0], 5), vec![1, 0]);
    }
}
