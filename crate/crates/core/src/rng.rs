use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random stream handed out by [`RngSeedTree`].
pub type Stream = ChaCha8Rng;

/// Round key reserved for experiment setup (data generation, decoy shards,
/// toy instances). Never collides with a real round index.
pub const SETUP_ROUND: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamTag {
    Sample,
    Noise,
    Oracle,
}

impl StreamTag {
    fn code(self) -> u64 {
        match self {
            StreamTag::Sample => 0x73616d70,
            StreamTag::Noise => 0x6e6f6973,
            StreamTag::Oracle => 0x6f726163,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamTag::Sample => "sample",
            StreamTag::Noise => "noise",
            StreamTag::Oracle => "oracle",
        }
    }
}

impl fmt::Display for StreamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StreamTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(StreamTag::Sample),
            "noise" => Ok(StreamTag::Noise),
            "oracle" => Ok(StreamTag::Oracle),
            other => Err(Error::Config(format!("unknown stream tag {other:?}; expected one of sample, noise, oracle"))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed derivation of independent ChaCha streams from one master seed.
///
/// A stream depends only on the master seed and its key, so it can be
/// created on any thread in any order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSeedTree {
    pub master_seed: u64,
}

impl RngSeedTree {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn derive_stream(&self, round: u64, client: u64, tag: StreamTag) -> Stream {
        self.derive_indexed(round, client, tag, 0)
    }

    /// Like [`derive_stream`](Self::derive_stream) but parsing the tag from text.
    pub fn derive_stream_named(&self, round: u64, client: u64, tag: &str) -> Result<Stream> {
        Ok(self.derive_stream(round, client, tag.parse()?))
    }

    /// Sub-stream for replica or partition `index`; index 0 is the primary stream.
    pub fn derive_indexed(&self, round: u64, client: u64, tag: StreamTag, index: u64) -> Stream {
        let mut h = splitmix64(self.master_seed);
        for key in [round, client, tag.code(), index] {
            h = splitmix64(h ^ splitmix64(key));
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            h = splitmix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn draws(mut s: Stream, n: usize) -> Vec<u64> {
        (0..n).map(|_| s.random()).collect()
    }

    // Pearson independence test on a 10x10 contingency table of paired draws.
    fn independence_p_value(a: &[u64], b: &[u64]) -> f64 {
        let bins = 10usize;
        let mut table = vec![[0f64; 10]; 10];
        for (&x, &y) in a.iter().zip(b) {
            let i = (x % bins as u64) as usize;
            let j = (y % bins as u64) as usize;
            table[i][j] += 1.0;
        }
        let n = a.len() as f64;
        let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..bins).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let mut stat = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                let e = rows[i] * cols[j] / n;
                stat += (table[i][j] - e).powi(2) / e;
            }
        }
        let dist = ChiSquared::new(((bins - 1) * (bins - 1)) as f64).unwrap();
        1.0 - dist.cdf(stat)
    }

    #[test]
    fn same_key_same_sequence() {
        let t = RngSeedTree::new(7);
        let a = draws(t.derive_stream(0, 0, StreamTag::Sample), 64);
        let b = draws(t.derive_stream(0, 0, StreamTag::Sample), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn different_client_streams_are_independent() {
        let t = RngSeedTree::new(7);
        let a = draws(t.derive_stream(0, 0, StreamTag::Sample), 10_000);
        let b = draws(t.derive_stream(0, 1, StreamTag::Sample), 10_000);
        assert_ne!(a, b);
        assert!(independence_p_value(&a, &b) > 1e-4);
    }

    #[test]
    fn different_master_seeds_are_independent() {
        let a = draws(RngSeedTree::new(7).derive_stream(0, 0, StreamTag::Sample), 10_000);
        let b = draws(RngSeedTree::new(8).derive_stream(0, 0, StreamTag::Sample), 10_000);
        assert_ne!(a, b);
        assert!(independence_p_value(&a, &b) > 1e-4);
    }

    #[test]
    fn tags_and_indices_separate_streams() {
        let t = RngSeedTree::new(1);
        let s = draws(t.derive_stream(3, 2, StreamTag::Sample), 4);
        let n = draws(t.derive_stream(3, 2, StreamTag::Noise), 4);
        let o = draws(t.derive_stream(3, 2, StreamTag::Oracle), 4);
        let r = draws(t.derive_indexed(3, 2, StreamTag::Sample, 1), 4);
        assert!(s != n && n != o && s != o && s != r);
    }

    #[test]
    fn unknown_tag_is_config_error() {
        let t = RngSeedTree::new(7);
        assert!(matches!(t.derive_stream_named(0, 0, "bogus"), Err(Error::Config(_))));
        assert!(t.derive_stream_named(0, 0, "noise").is_ok());
    }

    #[test]
    fn order_and_thread_independent() {
        use rayon::prelude::*;
        let t = RngSeedTree::new(99);
        let seq: Vec<u64> = (0..32).map(|k| draws(t.derive_stream(1, k, StreamTag::Noise), 1)[0]).collect();
        let par: Vec<u64> = (0..32u64)
            .into_par_iter()
            .map(|k| draws(t.derive_stream(1, 31 - k, StreamTag::Noise), 1)[0])
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        assert_eq!(seq, par);
    }
}
