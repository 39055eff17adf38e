use std::collections::BTreeSet;

use crate::error::{Error, Result};

use super::SliceSample;

/// Source, validation, test and unlabeled-target partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    /// Labeled slices of domains 1 and 2.
    pub train_labeled: Vec<SliceSample>,
    pub validation: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
    /// Target-domain slices with their masks removed.
    pub target_unlabeled: Vec<SliceSample>,
    pub target_domain: u8,
}

fn subjects(samples: &[SliceSample]) -> Vec<u32> {
    samples.iter().map(|s| s.subject_id).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Splits a per-domain corpus. Domains 1 and 2 train; the target domain
/// (3 or 4) is split by subject: the lower half of its sorted subject ids
/// forms the unlabeled pool and the rest is held out. Held-out target
/// subjects form the test set for target 4 and the validation set for
/// target 3; the other of domains 3 and 4 is used whole.
pub fn make_split(corpus: &[Vec<SliceSample>], target_domain: u8) -> Result<DataSplit> {
    if target_domain != 3 && target_domain != 4 {
        return Err(Error::invalid("make_split", format!("target domain must be 3 or 4, got {target_domain}")));
    }
    let domain = |d: u8| -> Result<Vec<SliceSample>> {
        let found: Vec<_> = corpus.iter().flatten().filter(|s| s.domain_id == d).cloned().collect();
        if found.is_empty() {
            return Err(Error::MissingDomain(d));
        }
        Ok(found)
    };
    let mut train_labeled = domain(1)?;
    train_labeled.extend(domain(2)?);
    if train_labeled.iter().any(|s| !s.is_labeled()) {
        return Err(Error::invalid("make_split", "training domains must be labeled"));
    }
    let d3 = domain(3)?;
    let d4 = domain(4)?;
    let (target, other) = if target_domain == 4 { (d4, d3) } else { (d3, d4) };
    let ids = subjects(&target);
    let pool_ids: BTreeSet<u32> = ids[..ids.len() / 2].iter().copied().collect();
    let (pool, held): (Vec<_>, Vec<_>) = target.into_iter().partition(|s| pool_ids.contains(&s.subject_id));
    if pool.is_empty() {
        return Err(Error::EmptyPartition("target_unlabeled"));
    }
    if held.is_empty() {
        return Err(Error::EmptyPartition("held-out target"));
    }
    let target_unlabeled = pool.iter().map(SliceSample::unlabeled).collect();
    let (validation, test) = if target_domain == 4 { (other, held) } else { (held, other) };
    Ok(DataSplit {
        train_labeled,
        validation,
        test,
        target_unlabeled,
        target_domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    #[test]
    fn default_split_partitions_domain_four_by_subject() {
        let corpus = generate_corpus(20, 1, 16, 3).unwrap();
        let s = make_split(&corpus, 4).unwrap();
        let pool: BTreeSet<_> = s.target_unlabeled.iter().map(|x| x.subject_id).collect();
        let test: BTreeSet<_> = s.test.iter().map(|x| x.subject_id).collect();
        assert_eq!((pool.len(), test.len()), (10, 10));
        assert!(pool.is_disjoint(&test));
        assert!(s.target_unlabeled.iter().all(|x| !x.is_labeled() && x.domain_id == 4));
        assert!(s.validation.iter().all(|x| x.domain_id == 3));
        assert_eq!(s.train_labeled.len(), 40);
    }

    #[test]
    fn missing_domain_is_rejected() {
        let mut corpus = generate_corpus(2, 1, 16, 3).unwrap();
        corpus.remove(2);
        assert!(matches!(make_split(&corpus, 4), Err(Error::MissingDomain(3))));
    }
}
