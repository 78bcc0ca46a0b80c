use super::LookupBundle;
use crate::{ClusterId, Error, Result};

/// Token id written into padding slots.
pub const PAD_TOKEN: u32 = u32::MAX;

/// Per token: the n-gram prediction when the token has a history whose row
/// confidence strictly beats the token table, otherwise the token table.
///
/// `history` holds `n` previous devices per token (`[token][n]`, oldest
/// first). Tokens beyond the table's vocabulary use `token mod E`.
pub fn lookup_device(
    batch: &[u32],
    history: Option<&[ClusterId]>,
    bundle: &LookupBundle,
    layer: usize,
) -> Vec<ClusterId> {
    let labels = bundle.token_labels(layer);
    let conf = bundle.token_confidence(layer);
    let e = bundle.n_clusters;
    let ngram = bundle.ngram.as_ref().zip(history);
    batch
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let t = tok as usize;
            let (label, c) = if t < labels.len() { (labels[t], conf[t]) } else { ((t % e) as ClusterId, 0.0) };
            if let Some((g, h)) = ngram {
                let row = g.row_index(&h[i * g.n..(i + 1) * g.n]);
                if g.confidence(row) > c {
                    return g.labels[row];
                }
            }
            label
        })
        .collect()
}

/// Inverse information for [`rebatch_tokens`]. `perm[slot]` is the source
/// index placed in `slot`; sources `>= n_tokens` are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleIndices {
    pub perm: Vec<u32>,
    pub pad_mask: Vec<bool>,
    pub n_tokens: usize,
    pub n_devices: usize,
    pub group_size: usize,
}

impl ShuffleIndices {
    /// `[start, end)` slot range of a device group.
    pub fn group(&self, device: usize) -> std::ops::Range<usize> {
        device * self.group_size..(device + 1) * self.group_size
    }

    pub fn padding(&self) -> usize {
        self.perm.len() - self.n_tokens
    }
}

/// Stable sort of the batch by device, each device group padded to the size
/// of the largest group, groups concatenated in device order. Devices are
/// `cluster mod G`.
pub fn rebatch_tokens(batch: &[u32], clusters: &[ClusterId], n_devices: usize) -> Result<(Vec<u32>, ShuffleIndices)> {
    if batch.len() != clusters.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} tokens with {} device ids",
            batch.len(),
            clusters.len()
        )));
    }
    if n_devices == 0 {
        return Err(Error::InvalidTopology("zero devices".into()));
    }
    let n = batch.len();
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); n_devices];
    for (i, &c) in clusters.iter().enumerate() {
        groups[c as usize % n_devices].push(i as u32);
    }
    let group_size = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut perm = Vec::with_capacity(group_size * n_devices);
    let mut next_pad = n as u32;
    for g in &groups {
        perm.extend_from_slice(g);
        for _ in g.len()..group_size {
            perm.push(next_pad);
            next_pad += 1;
        }
    }
    let pad_mask: Vec<bool> = perm.iter().map(|&p| p as usize >= n).collect();
    let shuffled = perm.iter().map(|&p| batch.get(p as usize).copied().unwrap_or(PAD_TOKEN)).collect();
    Ok((shuffled, ShuffleIndices { perm, pad_mask, n_tokens: n, n_devices, group_size }))
}

/// Undoes [`rebatch_tokens`]: scatters non-pad slots back to their source
/// positions.
pub fn resume_tokens<T: Copy>(shuffled: &[T], indices: &ShuffleIndices) -> Result<Vec<T>> {
    if shuffled.len() != indices.perm.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} slots for a shuffle of {}",
            shuffled.len(),
            indices.perm.len()
        )));
    }
    let mut out: Vec<Option<T>> = vec![None; indices.n_tokens];
    for (slot, &src) in indices.perm.iter().enumerate() {
        if !indices.pad_mask[slot] {
            out[src as usize] = Some(shuffled[slot]);
        }
    }
    out.into_iter()
        .map(|x| x.ok_or_else(|| Error::DimensionMismatch("shuffle indices are not a bijection".into())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{DeviceNGramTable, TokenDeviceTable};

    #[test]
    fn skew_pads_the_empty_group() {
        let batch = [5, 6, 7];
        let (s, idx) = rebatch_tokens(&batch, &[0, 0, 0], 2).unwrap();
        assert_eq!(s, vec![5, 6, 7, PAD_TOKEN, PAD_TOKEN, PAD_TOKEN]);
        assert!(idx.pad_mask[idx.group(1)].iter().all(|&p| p));
        assert_eq!(resume_tokens(&s, &idx).unwrap(), batch);
    }

    #[test]
    fn grouped_batch_is_identity() {
        let (s, idx) = rebatch_tokens(&[1, 2, 3, 4], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(s, vec![1, 2, 3, 4]);
        assert_eq!(idx.perm, vec![0, 1, 2, 3]);
    }

    #[test]
    fn swap_is_undone() {
        let (s, idx) = rebatch_tokens(&[1, 2], &[1, 0], 2).unwrap();
        assert_eq!(s, vec![2, 1]);
        assert_eq!(resume_tokens(&s, &idx).unwrap(), vec![1, 2]);
        assert!(resume_tokens(&s[..1], &idx).is_err());
    }

    fn bundle(conf: f32, ngram_conf: f64) -> LookupBundle {
        let mut t = TokenDeviceTable::fallback(4, 2);
        t.confidence[0] = conf;
        let mut g = DeviceNGramTable::empty(2, 1).unwrap();
        // history device 0 -> predicts 1
        g.probs = vec![1.0 - ngram_conf, ngram_conf, 0.0, 0.0];
        g.best = vec![1, 0];
        LookupBundle::from_layers(&[t], &[vec![0, 1]], Some(&g)).unwrap()
    }

    #[test]
    fn confidence_comparison_is_strict() {
        assert_eq!(lookup_device(&[0], Some(&[0]), &bundle(1.0, 0.3), 0), vec![0]);
        assert_eq!(lookup_device(&[0], Some(&[0]), &bundle(0.5, 0.5), 0), vec![0]);
        assert_eq!(lookup_device(&[0], Some(&[0]), &bundle(0.25, 0.75), 0), vec![1]);
        assert_eq!(lookup_device(&[0], None, &bundle(0.25, 0.75), 0), vec![0]);
        // unseen row (history 1) never wins
        assert_eq!(lookup_device(&[0], Some(&[1]), &bundle(0.0, 0.75), 0), vec![0]);
        // out-of-vocabulary id
        assert_eq!(lookup_device(&[9], None, &bundle(0.5, 0.5), 0), vec![1]);
    }
}
