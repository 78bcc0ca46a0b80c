use crate::ClusterId;

/// Device mask for data-parallel request scheduling. Every device is used
/// once per round of `E` calls; the mask resets when the round completes.
///
/// One instance is meant for one caller at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestScheduler {
    available: Vec<bool>,
    remaining: usize,
}

impl RequestScheduler {
    pub fn new(n_devices: usize) -> Self {
        assert!(n_devices >= 1, "need at least one device");
        Self { available: vec![true; n_devices], remaining: n_devices }
    }

    pub fn n_devices(&self) -> usize {
        self.available.len()
    }

    pub fn available(&self) -> &[bool] {
        &self.available
    }

    fn take(&mut self, device: usize) {
        self.available[device] = false;
        self.remaining -= 1;
        if self.remaining == 0 {
            self.available.iter_mut().for_each(|a| *a = true);
            self.remaining = self.available.len();
        }
    }
}

/// Scores each available device by how many request tokens the token table
/// places there and takes the best (ties to the lower id). Tokens outside
/// the table are ignored.
pub fn schedule_request_dp(request: &[u32], token_labels: &[ClusterId], state: &mut RequestScheduler) -> ClusterId {
    let e = state.n_devices();
    let mut score = vec![0u64; e];
    for &tok in request {
        if let Some(&c) = token_labels.get(tok as usize) {
            score[c as usize % e] += 1;
        }
    }
    let mut best: Option<usize> = None;
    for d in 0..e {
        if state.available[d] && best.is_none_or(|b| score[d] > score[b]) {
            best = Some(d);
        }
    }
    let d = best.expect("a round always has an available device");
    state.take(d);
    d as ClusterId
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affinity_then_forced_round_robin() {
        let labels = [1, 1, 0];
        let mut s = RequestScheduler::new(2);
        assert_eq!(schedule_request_dp(&[0, 1], &labels, &mut s), 1);
        assert_eq!(s.available(), &[true, false]);
        assert_eq!(schedule_request_dp(&[0, 1], &labels, &mut s), 0);
        assert_eq!(s.available(), &[true, true]);
    }

    #[test]
    fn identical_requests_cycle_devices() {
        let labels = [2, 2, 2, 2];
        let mut s = RequestScheduler::new(4);
        let picks: Vec<_> = (0..8).map(|_| schedule_request_dp(&[0, 1], &labels, &mut s)).collect();
        assert_eq!(picks, vec![2, 0, 1, 3, 2, 0, 1, 3]);
    }
}
