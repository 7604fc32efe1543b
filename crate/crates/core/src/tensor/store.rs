//! Named, group-tagged parameter collection.
//!
//! Parameters belong to one of two update groups: the style-encoder layer
//! (the set that fast adaptation fine-tunes) and everything else. Group tags
//! are fixed at registration. Snapshots are plain data (`Send`), restore is
//! bitwise, and iteration order is registration order so that serialized
//! artifacts are reproducible.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Transformer-encoder-layer parameters: updated during fast adaptation.
    StyleEncoder,
    /// Decoder layer, backbone, embeddings: frozen during fast adaptation.
    Other,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::StyleEncoder => write!(f, "style_encoder"),
            ParamGroup::Other => write!(f, "other"),
        }
    }
}

impl std::str::FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style_encoder" => Ok(ParamGroup::StyleEncoder),
            "other" => Ok(ParamGroup::Other),
            other => Err(Error::Parse {
                what: "param group",
                detail: format!("unknown group tag {other:?}"),
            }),
        }
    }
}

struct Entry {
    name: String,
    tensor: Tensor,
    group: ParamGroup,
}

/// Learnable parameters, keyed by unique name.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

/// Plain-data copy of a store: names, groups, shapes, values. `Send + Clone`,
/// so it is also the unit that crosses worker threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub entries: Vec<SnapshotEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor as a learnable parameter. The tensor is marked
    /// `requires_grad` and the returned handle shares storage with the store.
    pub fn register(&mut self, name: &str, tensor: Tensor, group: ParamGroup) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Store(format!("duplicate parameter name {name:?}")));
        }
        tensor.set_requires_grad(true);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor: tensor.clone(),
            group,
        });
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.index
            .get(name)
            .map(|&i| self.entries[i].tensor.clone())
            .ok_or_else(|| Error::Store(format!("unknown parameter {name:?}")))
    }

    pub fn group_of(&self, name: &str) -> Result<ParamGroup> {
        self.index
            .get(name)
            .map(|&i| self.entries[i].group)
            .ok_or_else(|| Error::Store(format!("unknown parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamGroup)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.tensor, e.group))
    }

    /// Reset every parameter's gradient to zeros.
    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Drop all gradient buffers.
    pub fn clear_grads(&self) {
        for e in &self.entries {
            e.tensor.clear_grad();
        }
    }

    /// One SGD step, `p <- p - lr * grad`, applied only to parameters whose
    /// group is in `groups`. Parameters outside the selection are untouched.
    pub fn sgd_step(&self, lr: f64, groups: &[ParamGroup]) -> Result<()> {
        for e in &self.entries {
            if !groups.contains(&e.group) {
                continue;
            }
            let mut node = e.tensor.0.borrow_mut();
            let node = &mut *node;
            let grad = node.grad.as_ref().ok_or_else(|| Error::MissingGrad {
                name: e.name.clone(),
            })?;
            for (p, g) in node.data.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            entries: self
                .entries
                .iter()
                .map(|e| SnapshotEntry {
                    name: e.name.clone(),
                    group: e.group,
                    shape: e.tensor.shape(),
                    values: e.tensor.to_vec(),
                })
                .collect(),
        }
    }

    /// Bitwise restore of previously snapshotted values. Names, groups, and
    /// shapes must match the store exactly.
    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        if snap.entries.len() != self.entries.len() {
            return Err(Error::Store(format!(
                "snapshot has {} entries, store has {}",
                snap.entries.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter().zip(&snap.entries) {
            if e.name != s.name || e.group != s.group || e.tensor.shape() != s.shape {
                return Err(Error::Store(format!(
                    "snapshot entry {:?} does not match store entry {:?}",
                    s.name, e.name
                )));
            }
        }
        for (e, s) in self.entries.iter().zip(&snap.entries) {
            e.tensor.set_data(&s.values);
        }
        Ok(())
    }

    /// Build a fresh store (fresh tensors, same names/groups/values).
    pub fn from_snapshot(snap: &Snapshot) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for s in &snap.entries {
            let t = Tensor::from_vec(s.values.clone(), &s.shape)?;
            store.register(&s.name, t, s.group)?;
        }
        Ok(store)
    }

    /// Reptile blend toward the current values: `p <- base + eta * (p - base)`.
    /// The endpoints are handled exactly: eta = 0 restores `base` bitwise and
    /// eta = 1 keeps the current values bitwise.
    pub fn blend_from(&self, base: &Snapshot, eta: f64) -> Result<()> {
        if eta == 0.0 {
            return self.restore(base);
        }
        if eta == 1.0 {
            return Ok(());
        }
        if base.entries.len() != self.entries.len() {
            return Err(Error::Store("blend_from: snapshot size mismatch".into()));
        }
        for (e, s) in self.entries.iter().zip(&base.entries) {
            let mut node = e.tensor.0.borrow_mut();
            for (p, b) in node.data.iter_mut().zip(&s.values) {
                *p = b + eta * (*p - b);
            }
        }
        Ok(())
    }

    /// True when every parameter in `groups` matches the snapshot bitwise.
    pub fn bitwise_eq_in_groups(&self, snap: &Snapshot, groups: &[ParamGroup]) -> bool {
        self.entries.iter().zip(&snap.entries).all(|(e, s)| {
            if !groups.contains(&e.group) {
                return true;
            }
            e.tensor
                .data()
                .iter()
                .zip(&s.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn demo_store() -> ParamStore {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        store
            .register(
                "enc.w",
                Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng),
                ParamGroup::StyleEncoder,
            )
            .unwrap();
        store
            .register(
                "dec.w",
                Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng),
                ParamGroup::Other,
            )
            .unwrap();
        store
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = demo_store();
        let err = store
            .register("enc.w", Tensor::zeros(&[1]), ParamGroup::Other)
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn snapshot_restore_roundtrips_bitwise() {
        let store = demo_store();
        let snap = store.snapshot();
        // Scribble over everything, then restore.
        for (_, t, _) in store.iter() {
            let junk: Vec<f64> = t.to_vec().iter().map(|v| v * -3.7 + 0.1).collect();
            t.set_data(&junk);
        }
        store.restore(&snap).unwrap();
        assert!(store.bitwise_eq_in_groups(&snap, &[ParamGroup::StyleEncoder, ParamGroup::Other]));
    }

    #[test]
    fn sgd_zero_lr_leaves_store_unchanged() {
        let store = demo_store();
        let snap = store.snapshot();
        store.zero_grads();
        store
            .sgd_step(0.0, &[ParamGroup::StyleEncoder, ParamGroup::Other])
            .unwrap();
        assert!(store.bitwise_eq_in_groups(&snap, &[ParamGroup::StyleEncoder, ParamGroup::Other]));
    }

    #[test]
    fn sgd_scalar_hand_case() {
        // p = 1, grad = 2, lr = 0.1 -> p = 0.8
        let mut store = ParamStore::new();
        let p = store
            .register("p", Tensor::scalar(1.0), ParamGroup::Other)
            .unwrap();
        p.accumulate_grad(&[2.0]);
        store.sgd_step(0.1, &[ParamGroup::Other]).unwrap();
        assert!((p.value() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_group_filter_leaves_other_group_bitwise() {
        let store = demo_store();
        let snap = store.snapshot();
        store.zero_grads();
        // Nonzero grads everywhere; only style_encoder gets stepped.
        for (_, t, _) in store.iter() {
            t.accumulate_grad(&vec![1.0; t.numel()]);
        }
        store.sgd_step(0.5, &[ParamGroup::StyleEncoder]).unwrap();
        assert!(store.bitwise_eq_in_groups(&snap, &[ParamGroup::Other]));
        assert!(!store.bitwise_eq_in_groups(&snap, &[ParamGroup::StyleEncoder]));
    }

    #[test]
    fn sgd_missing_grad_errors() {
        let store = demo_store();
        store.clear_grads();
        let err = store.sgd_step(0.1, &[ParamGroup::StyleEncoder]).unwrap_err();
        assert!(err.to_string().contains("gradient missing"));
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let store = demo_store();
        let theta = store.snapshot();
        // Move the store somewhere else (this is "omega").
        for (_, t, _) in store.iter() {
            let moved: Vec<f64> = t.to_vec().iter().map(|v| v + 0.25).collect();
            t.set_data(&moved);
        }
        let omega = store.snapshot();

        store.blend_from(&theta, 1.0).unwrap();
        assert!(store.bitwise_eq_in_groups(&omega, &[ParamGroup::StyleEncoder, ParamGroup::Other]));

        store.blend_from(&theta, 0.0).unwrap();
        assert!(store.bitwise_eq_in_groups(&theta, &[ParamGroup::StyleEncoder, ParamGroup::Other]));
    }

    #[test]
    fn group_tags_parse_and_display() {
        assert_eq!(ParamGroup::StyleEncoder.to_string(), "style_encoder");
        assert_eq!("other".parse::<ParamGroup>().unwrap(), ParamGroup::Other);
        assert!("bogus".parse::<ParamGroup>().is_err());
    }
}
