use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Train then validation ids: everything the pipeline may look at before
    /// evaluation.
    pub fn development(&self) -> Vec<String> {
        self.train.iter().chain(&self.val).cloned().collect()
    }
}

/// Part sizes for `n` items: floors of the exact shares, with the remainder
/// handed out by largest fractional part (earlier part on ties).
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut sizes = exact.map(|x| (x + 1e-9).floor() as usize);
    let mut rest = n.saturating_sub(sizes.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    if fractions.iter().all(|&f| f <= 0.0) {
        return sizes;
    }
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if fractions[k] > 0.0 {
            sizes[k] += 1;
            rest -= 1;
        }
    }
    sizes
}

/// Seeded partition of volume ids; the outcome does not depend on the order
/// the ids are given in.
pub fn split_dataset(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<Split> {
    let needed = fractions.iter().filter(|&&f| f > 0.0).count();
    if ids.len() < needed {
        return Err(Error::Config(format!(
            "{} volumes cannot fill {needed} nonempty splits",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Config("volume ids are not unique".into()));
    }
    let mut sizes = split_sizes(sorted.len(), fractions);
    // every nonzero fraction gets at least one volume
    for k in 0..3 {
        if fractions[k] > 0.0 && sizes[k] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).expect("3 parts");
            sizes[donor] -= 1;
            sizes[k] += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let test = sorted.split_off(sizes[0] + sizes[1]);
    let val = sorted.split_off(sizes[0]);
    let mut split = Split {
        train: sorted,
        val,
        test,
    };
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:04}")).collect()
    }

    #[test]
    fn sizes_of_369() {
        assert_eq!(split_sizes(369, [0.7, 0.1, 0.2]), [258, 37, 74]);
        assert_eq!(split_sizes(40, [0.7, 0.1, 0.2]), [28, 4, 8]);
        assert_eq!(split_sizes(10, [0.0, 0.5, 0.5]), [0, 5, 5]);
    }

    #[test]
    fn too_few_ids() {
        assert!(matches!(
            split_dataset(&ids(2), [0.7, 0.1, 0.2], 0),
            Err(Error::Config(_))
        ));
        let s = split_dataset(&ids(3), [0.7, 0.1, 0.2], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn seed_changes_partition() {
        let a = split_dataset(&ids(50), [0.7, 0.1, 0.2], 1).unwrap();
        let b = split_dataset(&ids(50), [0.7, 0.1, 0.2], 2).unwrap();
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn partition_is_exact_and_order_free(n in 3usize..120, seed in any::<u64>(), rot in 0usize..120) {
            let all = ids(n);
            let s = split_dataset(&all, [0.7, 0.1, 0.2], seed).unwrap();
            let mut joined: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            joined.sort();
            prop_assert_eq!(&joined, &all);
            let mut shuffled = all.clone();
            shuffled.rotate_left(rot % n);
            prop_assert_eq!(split_dataset(&shuffled, [0.7, 0.1, 0.2], seed).unwrap(), s);
        }

        #[test]
        fn sizes_sum_to_n(n in 0usize..1000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (a, b) = if a + b > 1.0 { (a / 2.0, b / 2.0) } else { (a, b) };
            let sizes = split_sizes(n, [a, b, 1.0 - a - b]);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            for (k, f) in [a, b, 1.0 - a - b].into_iter().enumerate() {
                prop_assert!((sizes[k] as f64 - f * n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }
}
