//! Per-layer ring buffers of rotated keys and values.
//!
//! Keys are stored after the rotary embedding, so a cached key never needs
//! re-rotation. Capacity is the sliding window when one is configured and the
//! context length otherwise; once full, the oldest entry is overwritten.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Element;

#[derive(Debug, Clone)]
struct LayerRing<T> {
    keys: Vec<T>,
    values: Vec<T>,
    positions: Vec<usize>,
    kv_heads: usize,
    head_dim: usize,
    /// Entries ever appended; also the position the next entry receives.
    written: usize,
}

impl<T: Element> LayerRing<T> {
    fn entry_len(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

/// Snapshot of one layer's cache, oldest entry first.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheView<T> {
    /// `[n x kv_heads x head_dim]`
    pub keys: Vec<T>,
    /// `[n x kv_heads x head_dim]`
    pub values: Vec<T>,
    pub positions: Vec<usize>,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl<T> CacheView<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Key/value cache for one generation session.
#[derive(Debug, Clone)]
pub struct KVCache<T> {
    layers: Vec<LayerRing<T>>,
    capacity: usize,
    next_pos: usize,
}

impl<T: Element> KVCache<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let capacity = config.cache_capacity();
        let head_dim = config.head_dim();
        let layers = (0..config.n_layers)
            .map(|l| {
                let kv_heads = config.kv_heads_at(l);
                let n = capacity * kv_heads * head_dim;
                LayerRing {
                    keys: vec![T::zero(); n],
                    values: vec![T::zero(); n],
                    positions: vec![0; capacity],
                    kv_heads,
                    head_dim,
                    written: 0,
                }
            })
            .collect();
        Ok(Self {
            layers,
            capacity,
            next_pos: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tokens committed across all layers.
    pub fn tokens_seen(&self) -> usize {
        self.next_pos
    }

    fn ring(&self, layer: usize) -> Result<&LayerRing<T>> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::CacheMismatch(format!("no layer {layer}")))
    }

    /// Entries appended to `layer` so far, including any not yet committed.
    pub fn layer_len_seen(&self, layer: usize) -> Result<usize> {
        Ok(self.ring(layer)?.written)
    }

    /// Stores one token's rotated key and value for `layer` and returns the
    /// absolute position assigned to it.
    pub fn append(&mut self, layer: usize, k_entry: &[T], v_entry: &[T]) -> Result<usize> {
        let capacity = self.capacity;
        let ring = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::CacheMismatch(format!("no layer {layer}")))?;
        let e = ring.entry_len();
        if k_entry.len() != e || v_entry.len() != e {
            return Err(Error::CacheMismatch(format!(
                "entry of {} / {} values, layer {layer} expects {e}",
                k_entry.len(),
                v_entry.len()
            )));
        }
        let pos = ring.written;
        let slot = pos % capacity;
        ring.keys[slot * e..(slot + 1) * e].copy_from_slice(k_entry);
        ring.values[slot * e..(slot + 1) * e].copy_from_slice(v_entry);
        ring.positions[slot] = pos;
        ring.written += 1;
        Ok(pos)
    }

    /// Commits `n` tokens once every layer has appended them.
    pub fn advance(&mut self, n: usize) -> Result<()> {
        let target = self.next_pos + n;
        if let Some((l, r)) = self.layers.iter().enumerate().find(|(_, r)| r.written != target) {
            return Err(Error::CacheMismatch(format!(
                "layer {l} holds {} entries, expected {target}",
                r.written
            )));
        }
        self.next_pos = target;
        Ok(())
    }

    pub fn view(&self, layer: usize) -> Result<CacheView<T>> {
        let ring = self.ring(layer)?;
        let e = ring.entry_len();
        let n = ring.written.min(self.capacity);
        let start = ring.written - n;
        let mut view = CacheView {
            keys: Vec::with_capacity(n * e),
            values: Vec::with_capacity(n * e),
            positions: Vec::with_capacity(n),
            kv_heads: ring.kv_heads,
            head_dim: ring.head_dim,
        };
        for pos in start..ring.written {
            let slot = pos % self.capacity;
            view.keys.extend_from_slice(&ring.keys[slot * e..(slot + 1) * e]);
            view.values.extend_from_slice(&ring.values[slot * e..(slot + 1) * e]);
            view.positions.push(ring.positions[slot]);
        }
        Ok(view)
    }

    /// Bytes held by the key and value buffers.
    pub fn byte_size(&self) -> usize {
        self.layers
            .iter()
            .map(|r| (r.keys.len() + r.values.len()) * T::WIDTH.bytes())
            .sum()
    }
}
