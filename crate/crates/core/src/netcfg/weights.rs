use thiserror::Error;

use super::NetworkDef;
use crate::graph::{self, GraphError};

#[derive(Debug, Error, PartialEq)]
pub enum WeightError {
    #[error("weights file too short for its header")]
    BadHeader,
    #[error("weights size mismatch: expected {expected} floats, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("layer {layer}: batch-norm variance is negative")]
    NegativeVariance { layer: usize },
    #[error("weight store does not match the network at layer {layer}")]
    MisalignedStore { layer: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightHeader {
    pub major: i32,
    pub minor: i32,
    pub revision: i32,
    /// Number of training images seen.
    pub seen: u64,
}

impl WeightHeader {
    /// Versions from 0.2 on store `seen` as 64 bits.
    pub fn wide_seen(&self) -> bool {
        self.major * 10 + self.minor >= 2
    }

    pub fn byte_len(&self) -> usize {
        12 + if self.wide_seen() { 8 } else { 4 }
    }
}

impl Default for WeightHeader {
    fn default() -> Self {
        WeightHeader {
            major: 0,
            minor: 2,
            revision: 5,
            seen: 0,
        }
    }
}

/// Parameters of one convolutional layer, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    /// BN shift β when batch-normalized, plain bias otherwise.
    pub biases: Vec<f32>,
    pub bn: Option<BnStats>,
    /// `[filters][in_channels][size][size]`, row-major.
    pub kernel: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub gamma: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl ConvWeights {
    pub fn zeros(filters: usize, in_channels: usize, size: usize, batch_normalize: bool) -> Self {
        ConvWeights {
            biases: vec![0.0; filters],
            bn: batch_normalize.then(|| BnStats {
                gamma: vec![1.0; filters],
                mean: vec![0.0; filters],
                var: vec![1.0; filters],
            }),
            kernel: vec![0.0; filters * in_channels * size * size],
        }
    }

    pub fn float_count(&self) -> usize {
        self.biases.len() + self.bn.as_ref().map_or(0, |b| 3 * b.gamma.len()) + self.kernel.len()
    }
}

/// Per-layer parameters aligned to a [`NetworkDef`]: `convs[i]` is `Some` iff
/// layer `i` is convolutional.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub header: WeightHeader,
    pub convs: Vec<Option<ConvWeights>>,
}

impl WeightStore {
    /// Zero kernels and biases, identity batch norm.
    pub fn zeros(net: &NetworkDef) -> Result<Self, GraphError> {
        let shapes = graph::infer_shapes(net)?;
        let convs = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.kind
                    .as_conv()
                    .map(|c| ConvWeights::zeros(c.filters, shapes.input_of(net, i).c, c.size, c.batch_normalize))
            })
            .collect();
        Ok(WeightStore {
            header: WeightHeader::default(),
            convs,
        })
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvWeights> {
        self.convs.get(layer).and_then(Option::as_ref)
    }

    pub fn conv_mut(&mut self, layer: usize) -> Option<&mut ConvWeights> {
        self.convs.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn float_count(&self) -> usize {
        self.convs.iter().flatten().map(ConvWeights::float_count).sum()
    }

    /// Checks every block has the length the network implies.
    pub fn check_aligned(&self, net: &NetworkDef) -> Result<(), WeightError> {
        let shapes = graph::infer_shapes(net)?;
        if self.convs.len() != net.layers.len() {
            return Err(WeightError::MisalignedStore {
                layer: self.convs.len().min(net.layers.len()),
            });
        }
        for (i, layer) in net.layers.iter().enumerate() {
            match (layer.kind.as_conv(), &self.convs[i]) {
                (None, None) => {}
                (Some(c), Some(w)) => {
                    let n = c.filters;
                    let expect_kernel = n * shapes.input_of(net, i).c * c.size * c.size;
                    let bn_ok = match &w.bn {
                        Some(b) => c.batch_normalize && b.gamma.len() == n && b.mean.len() == n && b.var.len() == n,
                        None => !c.batch_normalize,
                    };
                    if w.biases.len() != n || w.kernel.len() != expect_kernel || !bn_ok {
                        return Err(WeightError::MisalignedStore { layer: i });
                    }
                }
                _ => return Err(WeightError::MisalignedStore { layer: i }),
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        out
    }

    fn floats(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| f32::from_le_bytes(self.take())).collect()
    }
}

fn read_header(bytes: &[u8]) -> Result<(WeightHeader, usize), WeightError> {
    if bytes.len() < 16 {
        return Err(WeightError::BadHeader);
    }
    let mut r = Reader { bytes, pos: 0 };
    let major = i32::from_le_bytes(r.take());
    let minor = i32::from_le_bytes(r.take());
    let revision = i32::from_le_bytes(r.take());
    let mut header = WeightHeader {
        major,
        minor,
        revision,
        seen: 0,
    };
    if header.wide_seen() {
        if bytes.len() < 20 {
            return Err(WeightError::BadHeader);
        }
        header.seen = u64::from_le_bytes(r.take());
    } else {
        header.seen = u64::from(u32::from_le_bytes(r.take()));
    }
    Ok((header, r.pos))
}

/// Decodes a weights file against `net`. The byte length must match the
/// network's parameter count exactly.
pub fn load_weights(bytes: &[u8], net: &NetworkDef) -> Result<WeightStore, WeightError> {
    let counts = graph::count_parameters(net)?;
    let shapes = graph::infer_shapes(net)?;
    let (header, offset) = read_header(bytes)?;
    let payload = bytes.len() - offset;
    if !payload.is_multiple_of(4) || payload / 4 != counts.total {
        return Err(WeightError::SizeMismatch {
            expected: counts.total,
            actual: payload / 4,
        });
    }
    let mut r = Reader { bytes, pos: offset };
    let mut convs = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let Some(c) = layer.kind.as_conv() else {
            convs.push(None);
            continue;
        };
        let n = c.filters;
        let biases = r.floats(n);
        let bn = if c.batch_normalize {
            let gamma = r.floats(n);
            let mean = r.floats(n);
            let var = r.floats(n);
            if var.iter().any(|&v| v < 0.0) {
                return Err(WeightError::NegativeVariance { layer: i });
            }
            Some(BnStats { gamma, mean, var })
        } else {
            None
        };
        let kernel = r.floats(n * shapes.input_of(net, i).c * c.size * c.size);
        convs.push(Some(ConvWeights { biases, bn, kernel }));
    }
    debug_assert_eq!(r.pos, bytes.len());
    Ok(WeightStore { header, convs })
}

pub fn save_weights(store: &WeightStore, net: &NetworkDef) -> Result<Vec<u8>, WeightError> {
    store.check_aligned(net)?;
    let h = &store.header;
    let mut out = Vec::with_capacity(h.byte_len() + 4 * store.float_count());
    out.extend_from_slice(&h.major.to_le_bytes());
    out.extend_from_slice(&h.minor.to_le_bytes());
    out.extend_from_slice(&h.revision.to_le_bytes());
    if h.wide_seen() {
        out.extend_from_slice(&h.seen.to_le_bytes());
    } else {
        out.extend_from_slice(&(h.seen as u32).to_le_bytes());
    }
    let mut put = |xs: &[f32]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for w in store.convs.iter().flatten() {
        put(&w.biases);
        if let Some(bn) = &w.bn {
            put(&bn.gamma);
            put(&bn.mean);
            put(&bn.var);
        }
        put(&w.kernel);
    }
    Ok(out)
}
