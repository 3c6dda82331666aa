use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Per-node minibatch stream. Each epoch is `epoch_len` indices made of
/// fresh shuffles of the partition, concatenated and truncated, so smaller
/// partitions wrap around while the largest is seen exactly once.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sampler {
    pub(crate) order: Vec<usize>,
    pub(crate) pos: usize,
}

impl Sampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_batch(&mut self, partition: &[usize], epoch_len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.clear();
            while self.order.len() < epoch_len {
                let mut perm = partition.to_vec();
                perm.shuffle(rng);
                self.order.extend(perm);
            }
            self.order.truncate(epoch_len);
            self.pos = 0;
        }
        let end = (self.pos + batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}
