//! Attention-distance analysis.
//!
//! For every query position, the attention edge is the key position with
//! the highest weight (ties break to the smallest key index); the distance
//! is the absolute position difference in tokens. Histograms report bucket
//! percentages, optionally pooling everything beyond `N/2` into the last
//! bucket, grouped per layer or per `(layer, head)`.
//!
//! Besides locally trained models, the analysis accepts attention dumps
//! produced elsewhere: a binary file `MSATTN01` + `u32 n, layers, heads`
//! followed by `layers * heads` dense `[n x n]` tensors (layer-major) in
//! the standard tensor format.

use crate::model::{AttentionSink, Binding, Encoder, HeadAttention, Input};
use crate::tensor::{serial, Graph, Tensor};
use crate::{Error, Result};
use rayon::prelude::*;
use std::io::{Read, Write};

/// One attention edge: strongest key for one query of one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub key: usize,
    pub distance: usize,
}

/// Edges of one head's retained rows; `rows[j]` holds `(start, weights)`
/// with absolute key positions `start..start + weights.len()`.
pub fn extract_edges(head: &HeadAttention) -> Result<Vec<AttentionRecord>> {
    if head.rows.is_empty() {
        return Err(Error::Data("empty attention map".into()));
    }
    let mut records = Vec::with_capacity(head.rows.len());
    for (query, (start, weights)) in head.rows.iter().enumerate() {
        if weights.is_empty() {
            return Err(Error::Data(format!("empty attention row for query {query}")));
        }
        let mut arg = 0usize;
        for (i, w) in weights.iter().enumerate() {
            if *w > weights[arg] {
                arg = i;
            }
        }
        let key = start + arg;
        records.push(AttentionRecord {
            layer: head.layer,
            head: head.head,
            query,
            key,
            distance: query.abs_diff(key),
        });
    }
    Ok(records)
}

/// Edges of a dense `[N x M]` map whose columns are absolute key positions.
pub fn extract_edges_dense(map: &Tensor, layer: usize, head: usize) -> Result<Vec<AttentionRecord>> {
    if map.shape().len() != 2 {
        return Err(Error::Data(format!("attention map must be rank 2, got {:?}", map.shape())));
    }
    let rows = (0..map.shape()[0])
        .map(|j| (0usize, map.row(j).to_vec()))
        .collect();
    extract_edges(&HeadAttention { layer, head, rows })
}

/// Bucketed distance percentages. Bucket `i < buckets-1` holds distance
/// `i`; the final bucket pools the rest. With `truncate_at_half`, every
/// distance above `n/2` also pools into the final bucket. Percentages sum
/// to 100.
pub fn distance_histogram(
    records: &[AttentionRecord],
    n: usize,
    buckets: usize,
    truncate_at_half: bool,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Data("no attention records".into()));
    }
    if buckets == 0 {
        return Err(Error::invalid("histogram buckets", "must be >= 1"));
    }
    let mut counts = vec![0usize; buckets];
    for r in records {
        let mut d = r.distance;
        if truncate_at_half && d > n / 2 {
            d = buckets - 1;
        }
        counts[d.min(buckets - 1)] += 1;
    }
    let total = records.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / total * 100.0).collect())
}

/// Distinct `(layer)` keys in ascending order.
pub fn layers_of(records: &[AttentionRecord]) -> Vec<usize> {
    let mut ls: Vec<usize> = records.iter().map(|r| r.layer).collect();
    ls.sort_unstable();
    ls.dedup();
    ls
}

/// Distinct `(layer, head)` keys in ascending order.
pub fn heads_of(records: &[AttentionRecord]) -> Vec<(usize, usize)> {
    let mut hs: Vec<(usize, usize)> = records.iter().map(|r| (r.layer, r.head)).collect();
    hs.sort_unstable();
    hs.dedup();
    hs
}

/// Per-layer histograms (heads pooled), mirroring the per-layer view.
pub fn histograms_by_layer(
    records: &[AttentionRecord],
    n: usize,
    buckets: usize,
    truncate_at_half: bool,
) -> Result<Vec<(usize, Vec<f64>)>> {
    layers_of(records)
        .into_iter()
        .map(|l| {
            let subset: Vec<AttentionRecord> =
                records.iter().copied().filter(|r| r.layer == l).collect();
            Ok((l, distance_histogram(&subset, n, buckets, truncate_at_half)?))
        })
        .collect()
}

/// Per-head histograms, mirroring the per-head view.
pub fn histograms_by_head(
    records: &[AttentionRecord],
    n: usize,
    buckets: usize,
    truncate_at_half: bool,
) -> Result<Vec<((usize, usize), Vec<f64>)>> {
    heads_of(records)
        .into_iter()
        .map(|(l, h)| {
            let subset: Vec<AttentionRecord> = records
                .iter()
                .copied()
                .filter(|r| r.layer == l && r.head == h)
                .collect();
            Ok(((l, h), distance_histogram(&subset, n, buckets, truncate_at_half)?))
        })
        .collect()
}

/// CSV with columns `layer,head,distance_bucket,percentage`; per-layer rows
/// use `ALL` for the head column.
pub fn histogram_csv(
    records: &[AttentionRecord],
    n: usize,
    buckets: usize,
    truncate_at_half: bool,
) -> Result<String> {
    let mut out = String::from("layer,head,distance_bucket,percentage\n");
    for (layer, hist) in histograms_by_layer(records, n, buckets, truncate_at_half)? {
        for (bucket, pct) in hist.iter().enumerate() {
            out.push_str(&format!("{layer},ALL,{bucket},{pct:.6}\n"));
        }
    }
    for ((layer, head), hist) in histograms_by_head(records, n, buckets, truncate_at_half)? {
        for (bucket, pct) in hist.iter().enumerate() {
            out.push_str(&format!("{layer},{head},{bucket},{pct:.6}\n"));
        }
    }
    Ok(out)
}

/// Encodes every sequence with attention retention and extracts all edges.
/// Sequences are processed in parallel; record order is deterministic
/// (sequence-major, then layer, then head).
pub fn probe_model(enc: &Encoder, sequences: &[Vec<usize>]) -> Result<Vec<AttentionRecord>> {
    if sequences.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let per_seq: Vec<Vec<AttentionRecord>> = sequences
        .par_iter()
        .map(|ids| -> Result<Vec<AttentionRecord>> {
            let mut g = Graph::new();
            let mut b = Binding::new(&enc.params, false);
            let mut sink = AttentionSink::new();
            enc.encode(&mut g, &mut b, Input::Tokens(ids), Some(&mut sink))?;
            let mut records = Vec::new();
            for head in &sink.heads {
                records.extend(extract_edges(head)?);
            }
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seq.into_iter().flatten().collect())
}

// ── Attention dumps ───────────────────────────────────────────────────

pub const DUMP_MAGIC: &[u8; 8] = b"MSATTN01";

/// Dense attention maps for one sequence: `maps[layer * heads + head]`
/// is `[n x n]`.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub maps: Vec<Tensor>,
}

impl AttentionDump {
    /// Expands retained (possibly windowed) rows to dense `[n x n]` maps.
    /// Out-of-window weights are zero; in-window softmax weights are
    /// strictly positive, so argmax edges are preserved.
    pub fn from_sink(sink: &AttentionSink, n: usize) -> Result<AttentionDump> {
        if sink.heads.is_empty() {
            return Err(Error::Data("attention sink holds no heads".into()));
        }
        let layers = sink.heads.iter().map(|h| h.layer).max().unwrap() + 1;
        let heads = sink.heads.iter().map(|h| h.head).max().unwrap() + 1;
        let mut maps = vec![Tensor::zeros(vec![n, n]); layers * heads];
        for h in &sink.heads {
            if h.rows.len() != n {
                return Err(Error::Data(format!(
                    "head {}/{} has {} rows, expected {n}",
                    h.layer,
                    h.head,
                    h.rows.len()
                )));
            }
            let map = &mut maps[h.layer * heads + h.head];
            for (j, (start, weights)) in h.rows.iter().enumerate() {
                map.data_mut()[j * n + start..j * n + start + weights.len()]
                    .copy_from_slice(weights);
            }
        }
        Ok(AttentionDump { n, layers, heads, maps })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let p = path.display().to_string();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
        f.write_all(DUMP_MAGIC).map_err(|e| Error::io(&p, e))?;
        for v in [self.n as u32, self.layers as u32, self.heads as u32] {
            f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&p, e))?;
        }
        for map in &self.maps {
            serial::write_tensor(&mut f, map).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<AttentionDump> {
        let p = path.display().to_string();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(&p, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| Error::io(&p, e))?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format { path: p, detail: "bad attention dump magic".into() });
        }
        let mut b4 = [0u8; 4];
        let mut next = |f: &mut std::fs::File| -> Result<u32> {
            f.read_exact(&mut b4).map_err(|e| Error::io(&p, e))?;
            Ok(u32::from_le_bytes(b4))
        };
        let n = next(&mut f)? as usize;
        let layers = next(&mut f)? as usize;
        let heads = next(&mut f)? as usize;
        if n == 0 || layers == 0 || heads == 0 {
            return Err(Error::Format { path: p, detail: "zero n/layers/heads".into() });
        }
        let mut maps = Vec::with_capacity(layers * heads);
        for i in 0..layers * heads {
            let t = serial::read_tensor(&mut f, &p)?;
            if t.shape() != [n, n] {
                return Err(Error::Format {
                    path: p,
                    detail: format!("map {i} has shape {:?}, expected [{n}, {n}]", t.shape()),
                });
            }
            maps.push(t);
        }
        Ok(AttentionDump { n, layers, heads, maps })
    }

    /// Edges of every map in the dump.
    pub fn records(&self) -> Result<Vec<AttentionRecord>> {
        let mut out = Vec::new();
        for l in 0..self.layers {
            for h in 0..self.heads {
                out.extend(extract_edges_dense(&self.maps[l * self.heads + h], l, h)?);
            }
        }
        Ok(out)
    }
}
