//! Patient-wise stratified fold plans.
//!
//! Subjects are assigned whole to folds, so no subject contributes images to
//! both the training and test side of any fold. Stratification shuffles each
//! class with a seeded stream and deals it round-robin; the deal offset for a
//! class continues where the previous class stopped, which keeps both the
//! per-class and the total fold sizes balanced to ±1.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, DatasetManifest};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, purpose};

/// Assignment of every subject to exactly one fold in `[0, k)`.
///
/// Fold `i`'s test set is the subjects assigned to `i`; its training set is
/// everyone else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignment.get(subject_id).copied()
    }

    pub fn test_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for f in self.assignment.values() {
            sizes[*f] += 1;
        }
        sizes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FoldPlan> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Build a stratified patient-wise fold plan.
///
/// Deterministic given `(manifest, k, seed)`. Every class present in the
/// manifest must have at least `k` subjects.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count k must be >= 2, got {k}")));
    }
    let mut by_class: [Vec<&str>; 3] = Default::default();
    for s in manifest.subjects() {
        by_class[s.label.index()].push(&s.id);
    }
    for label in ClassLabel::ALL {
        let count = by_class[label.index()].len();
        if count > 0 && count < k {
            return Err(Error::TooFewSubjectsInClass {
                label: label.name().to_string(),
                count,
                k,
            });
        }
    }

    let mut assignment = BTreeMap::new();
    let mut offset = 0usize;
    for label in ClassLabel::ALL {
        let ids = &mut by_class[label.index()];
        let mut rng = derive_rng(seed, purpose::FOLD_PLAN, label.index() as u64);
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            assignment.insert(id.to_string(), (offset + i) % k);
        }
        offset = (offset + ids.len()) % k;
    }
    Ok(FoldPlan {
        k,
        seed,
        assignment,
    })
}

/// Check the fold-plan invariants against a manifest: full coverage, folds
/// within range, and per-class fold sizes balanced to ±1.
pub fn validate_plan(plan: &FoldPlan, manifest: &DatasetManifest) -> Result<()> {
    if plan.assignment.len() != manifest.len() {
        return Err(Error::Config(format!(
            "plan covers {} subjects, manifest has {}",
            plan.assignment.len(),
            manifest.len()
        )));
    }
    let mut per_class = vec![[0usize; 3]; plan.k];
    for s in manifest.subjects() {
        let fold = plan
            .fold_of(&s.id)
            .ok_or_else(|| Error::Config(format!("subject `{}` missing from plan", s.id)))?;
        if fold >= plan.k {
            return Err(Error::Config(format!(
                "subject `{}` assigned to fold {fold} >= k = {}",
                s.id, plan.k
            )));
        }
        per_class[fold][s.label.index()] += 1;
    }
    for c in 0..3 {
        let counts: Vec<usize> = per_class.iter().map(|f| f[c]).collect();
        let (lo, hi) = (
            counts.iter().min().copied().unwrap_or(0),
            counts.iter().max().copied().unwrap_or(0),
        );
        if hi - lo > 1 {
            return Err(Error::Config(format!(
                "class {} fold sizes {counts:?} differ by more than 1",
                ClassLabel::ALL[c].name()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Source, SubjectRecord};

    fn manifest_with_counts(counts: [usize; 3]) -> DatasetManifest {
        let mut subjects = Vec::new();
        for (c, label) in ClassLabel::ALL.into_iter().enumerate() {
            for i in 0..counts[c] {
                subjects.push(SubjectRecord {
                    id: format!("{}{i:04}", label.name()),
                    label,
                    views: Default::default(),
                    source: Source::Clinical,
                });
            }
        }
        DatasetManifest::new(subjects).unwrap()
    }

    #[test]
    fn clinical_sized_folds_balance_exactly() {
        // 220 subjects split 121/73/26 over k=5: every test fold gets 44
        // subjects, with 24-25 control, 14-15 stroke, and 5-6 TIA.
        let manifest = manifest_with_counts([121, 73, 26]);
        let plan = make_folds(&manifest, 5, 99).unwrap();
        validate_plan(&plan, &manifest).unwrap();
        let mut per_class = vec![[0usize; 3]; 5];
        for s in manifest.subjects() {
            per_class[plan.fold_of(&s.id).unwrap()][s.label.index()] += 1;
        }
        for (fold, counts) in per_class.iter().enumerate() {
            assert_eq!(counts.iter().sum::<usize>(), 44, "fold {fold}");
            assert!((24..=25).contains(&counts[0]), "fold {fold}: {counts:?}");
            assert!((14..=15).contains(&counts[1]), "fold {fold}: {counts:?}");
            assert!((5..=6).contains(&counts[2]), "fold {fold}: {counts:?}");
        }
    }

    #[test]
    fn even_division_single_class() {
        let manifest = manifest_with_counts([10, 0, 0]);
        let plan = make_folds(&manifest, 5, 7).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn deterministic_given_seed() {
        let manifest = manifest_with_counts([23, 17, 9]);
        let a = make_folds(&manifest, 5, 1234).unwrap();
        let b = make_folds(&manifest, 5, 1234).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = make_folds(&manifest, 5, 1235).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_subjects_names_the_class() {
        let manifest = manifest_with_counts([10, 3, 0]);
        match make_folds(&manifest, 5, 0) {
            Err(Error::TooFewSubjectsInClass { label, count, k }) => {
                assert_eq!(label, "stroke");
                assert_eq!(count, 3);
                assert_eq!(k, 5);
            }
            other => panic!("expected TooFewSubjectsInClass, got {other:?}"),
        }
    }

    #[test]
    fn rejects_k_below_two() {
        let manifest = manifest_with_counts([4, 0, 0]);
        assert!(matches!(
            make_folds(&manifest, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn train_and_test_partition_subjects() {
        let manifest = manifest_with_counts([12, 8, 6]);
        let plan = make_folds(&manifest, 4, 5).unwrap();
        for fold in 0..4 {
            let test = plan.test_subjects(fold);
            let train = plan.train_subjects(fold);
            assert_eq!(test.len() + train.len(), manifest.len());
            for id in &test {
                assert!(!train.contains(id));
            }
        }
    }

    #[test]
    fn plan_file_round_trip() {
        let manifest = manifest_with_counts([6, 6, 6]);
        let plan = make_folds(&manifest, 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.json");
        plan.save(&path).unwrap();
        assert_eq!(FoldPlan::load(&path).unwrap(), plan);
    }
}
