//! Fully-connected MLP whose forward pass is built out of expression-graph
//! nodes, so the same network supports input derivatives (for PDE residuals)
//! and weight gradients (for training).

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ExprNode, Graph};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid MLP spec: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} network inputs, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("graph error: {0}")]
    Graph(#[from] crate::autodiff::AdError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt weight archive: {0}")]
    CorruptArchive(String),
    #[error("unsupported archive version {found}; supported versions: {supported}")]
    VersionMismatch { found: u32, supported: String },
    #[error("archive layout inconsistent: {0}")]
    LayoutInconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sin,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sin => "sin",
        }
    }
}

/// Shape of the network: inputs match the domain dimensions, output is the
/// scalar approximation of the solution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MLPSpec {
    pub input_width: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

impl MLPSpec {
    pub fn new(
        input_width: usize,
        hidden_layers: Vec<usize>,
        activation: Activation,
    ) -> Result<Self, NetError> {
        if input_width < 1 {
            return Err(NetError::InvalidSpec("input_width must be >= 1".into()));
        }
        if hidden_layers.iter().any(|&w| w < 1) {
            return Err(NetError::InvalidSpec(
                "hidden layer widths must be >= 1".into(),
            ));
        }
        Ok(MLPSpec {
            input_width,
            hidden_layers,
            activation,
        })
    }

    pub fn output_width(&self) -> usize {
        1
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers.len() + 2);
        w.push(self.input_width);
        w.extend_from_slice(&self.hidden_layers);
        w.push(1);
        w
    }

    /// Full layer list as commonly written, e.g. [2, 20, 20, 1].
    pub fn layer_list(&self) -> Vec<usize> {
        self.widths()
    }

    pub fn n_params(&self) -> usize {
        let w = self.widths();
        w.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Placement of one layer's weight block and bias block in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub rows: usize,
    pub cols: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

/// Flat parameter vector plus its per-layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub flat: Vec<f64>,
    pub layout: Vec<LayerLayout>,
    pub seed: u64,
}

fn layouts(spec: &MLPSpec) -> Vec<LayerLayout> {
    let widths = spec.widths();
    let mut out = Vec::with_capacity(widths.len() - 1);
    let mut offset = 0;
    for pair in widths.windows(2) {
        let (cols, rows) = (pair[0], pair[1]);
        let weight_offset = offset;
        let bias_offset = offset + rows * cols;
        offset = bias_offset + rows;
        out.push(LayerLayout {
            rows,
            cols,
            weight_offset,
            bias_offset,
        });
    }
    out
}

/// Glorot-uniform weights, zero biases; deterministic per seed.
pub fn init_glorot(spec: &MLPSpec, seed: u64) -> WeightStore {
    let layout = layouts(spec);
    let mut flat = vec![0.0; spec.n_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &layout {
        let bound = (6.0 / (l.cols + l.rows) as f64).sqrt();
        for w in flat[l.weight_offset..l.weight_offset + l.rows * l.cols].iter_mut() {
            let u: f64 = rng.random();
            *w = (2.0 * u - 1.0) * bound;
        }
        // biases stay zero
    }
    WeightStore { flat, layout, seed }
}

impl WeightStore {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Weight variable nodes registered in a graph, aligned to the flat vector.
#[derive(Debug, Clone)]
pub struct WeightVars {
    nodes: Vec<ExprNode>,
}

impl WeightVars {
    pub fn nodes(&self) -> &[ExprNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Register one graph variable per parameter (keys `w0..wN`) and bind the
/// store's current values.
pub fn register_weights(graph: &mut Graph, store: &WeightStore) -> Result<WeightVars, NetError> {
    let mut nodes = Vec::with_capacity(store.flat.len());
    for (i, &v) in store.flat.iter().enumerate() {
        let node = graph.new_var(&format!("w{i}"))?;
        graph.bind_node(node, v)?;
        nodes.push(node);
    }
    Ok(WeightVars { nodes })
}

/// Build the forward pass: activation-composed affine layers, final layer
/// affine with no activation. Returns the scalar output node.
pub fn forward(
    spec: &MLPSpec,
    weights: &WeightVars,
    store: &WeightStore,
    graph: &mut Graph,
    inputs: &[ExprNode],
) -> Result<ExprNode, NetError> {
    if inputs.len() != spec.input_width {
        return Err(NetError::WidthMismatch {
            expected: spec.input_width,
            got: inputs.len(),
        });
    }
    if weights.len() != store.flat.len() {
        return Err(NetError::LayoutInconsistent(format!(
            "{} registered weight vars for {} parameters",
            weights.len(),
            store.flat.len()
        )));
    }
    let n_layers = store.layout.len();
    let mut act: Vec<ExprNode> = inputs.to_vec();
    for (li, layer) in store.layout.iter().enumerate() {
        let mut next = Vec::with_capacity(layer.rows);
        for r in 0..layer.rows {
            let mut s = weights.nodes[layer.bias_offset + r];
            for (c, &z) in act.iter().enumerate() {
                let w = weights.nodes[layer.weight_offset + r * layer.cols + c];
                let wz = graph.mul(w, z);
                s = graph.add(s, wz);
            }
            if li + 1 < n_layers {
                s = match spec.activation {
                    Activation::Tanh => graph.tanh(s),
                    Activation::Sin => graph.sin(s),
                };
            }
            next.push(s);
        }
        act = next;
    }
    debug_assert_eq!(act.len(), 1);
    Ok(act[0])
}

// ---- weight archive -------------------------------------------------------

const MAGIC: &[u8; 4] = b"PINN";
const VERSION: u32 = 1;

fn crc32(data: &[u8]) -> u32 {
    // CRC-32 (IEEE 802.3), bitwise; archives are small.
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn encode(store: &WeightStore, spec: &MLPSpec) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.input_width as u32).to_le_bytes());
    buf.push(match spec.activation {
        Activation::Tanh => 0,
        Activation::Sin => 1,
    });
    buf.extend_from_slice(&(spec.hidden_layers.len() as u32).to_le_bytes());
    for &h in &spec.hidden_layers {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
    }
    buf.extend_from_slice(&store.seed.to_le_bytes());
    buf.extend_from_slice(&(store.flat.len() as u64).to_le_bytes());
    for &v in &store.flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Write the archive: magic, version, spec, seed, flat vector, CRC-32.
pub fn save(store: &WeightStore, spec: &MLPSpec, path: &Path) -> Result<(), NetError> {
    let bytes = encode(store, spec);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.buf.len() {
            return Err(NetError::CorruptArchive("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }
}

/// Read an archive produced by [`save`]; bit-exact round trip.
pub fn load(path: &Path) -> Result<(MLPSpec, WeightStore), NetError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 + 4 + 4 {
        return Err(NetError::CorruptArchive("truncated file".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(NetError::CorruptArchive("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NetError::VersionMismatch {
            found: version,
            supported: VERSION.to_string(),
        });
    }
    if crc32(body) != stored_crc {
        return Err(NetError::CorruptArchive("checksum failure".into()));
    }
    let input_width = c.u32()? as usize;
    let activation = match c.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Sin,
        a => {
            return Err(NetError::CorruptArchive(format!(
                "unknown activation tag {a}"
            )))
        }
    };
    let n_hidden = c.u32()? as usize;
    let mut hidden_layers = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_layers.push(c.u32()? as usize);
    }
    let seed = c.u64()?;
    let n_flat = c.u64()? as usize;
    let mut flat = Vec::with_capacity(n_flat);
    for _ in 0..n_flat {
        flat.push(c.f64()?);
    }
    if c.pos != body.len() {
        return Err(NetError::CorruptArchive("trailing bytes".into()));
    }
    let spec = MLPSpec::new(input_width, hidden_layers, activation)
        .map_err(|e| NetError::CorruptArchive(e.to_string()))?;
    if spec.n_params() != n_flat {
        return Err(NetError::LayoutInconsistent(format!(
            "spec expects {} parameters, archive holds {}",
            spec.n_params(),
            n_flat
        )));
    }
    let layout = layouts(&spec);
    Ok((spec, WeightStore { flat, layout, seed }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bound_and_zero_bias() {
        let spec = MLPSpec::new(2, vec![3], Activation::Tanh).unwrap();
        let ws = init_glorot(&spec, 1);
        let bound = (6.0f64 / 5.0).sqrt();
        let l0 = ws.layout[0];
        for &w in &ws.flat[l0.weight_offset..l0.weight_offset + 6] {
            assert!(w.abs() < bound);
        }
        for &b in &ws.flat[l0.bias_offset..l0.bias_offset + 3] {
            assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn glorot_deterministic() {
        let spec = MLPSpec::new(2, vec![4, 4], Activation::Tanh).unwrap();
        let a = init_glorot(&spec, 99);
        let b = init_glorot(&spec, 99);
        assert_eq!(a.flat, b.flat);
        let c = init_glorot(&spec, 100);
        assert_ne!(a.flat, c.flat);
    }

    #[test]
    fn affine_identity_forward() {
        // zero hidden layers: u = w*x + b with w=1, b=0
        let spec = MLPSpec::new(1, vec![], Activation::Tanh).unwrap();
        let mut ws = init_glorot(&spec, 0);
        ws.flat = vec![1.0, 0.0];
        let mut g = Graph::new();
        let wv = register_weights(&mut g, &ws).unwrap();
        let x = g.new_var("x").unwrap();
        let u = forward(&spec, &wv, &ws, &mut g, &[x]).unwrap();
        g.bind("x", 4.0).unwrap();
        assert_eq!(g.eval(u).unwrap(), 4.0);
    }

    #[test]
    fn zero_weights_zero_output() {
        let spec = MLPSpec::new(2, vec![5, 5], Activation::Tanh).unwrap();
        let mut ws = init_glorot(&spec, 0);
        ws.flat.iter_mut().for_each(|w| *w = 0.0);
        let mut g = Graph::new();
        let wv = register_weights(&mut g, &ws).unwrap();
        let x = g.new_var("x").unwrap();
        let t = g.new_var("t").unwrap();
        let u = forward(&spec, &wv, &ws, &mut g, &[x, t]).unwrap();
        g.bind("x", 0.7).unwrap();
        g.bind("t", -2.0).unwrap();
        assert_eq!(g.eval(u).unwrap(), 0.0);
    }

    #[test]
    fn known_tanh_chain() {
        // 1 -> 1 -> 1 tanh net, all weights 1, biases 0: u(0.5) = tanh(0.5)
        let spec = MLPSpec::new(1, vec![1], Activation::Tanh).unwrap();
        let mut ws = init_glorot(&spec, 0);
        ws.flat = vec![1.0, 0.0, 1.0, 0.0];
        let mut g = Graph::new();
        let wv = register_weights(&mut g, &ws).unwrap();
        let x = g.new_var("x").unwrap();
        let u = forward(&spec, &wv, &ws, &mut g, &[x]).unwrap();
        g.bind("x", 0.5).unwrap();
        let got = g.eval(u).unwrap();
        assert!((got - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_rejected() {
        let spec = MLPSpec::new(2, vec![3], Activation::Tanh).unwrap();
        let ws = init_glorot(&spec, 0);
        let mut g = Graph::new();
        let wv = register_weights(&mut g, &ws).unwrap();
        let x = g.new_var("x").unwrap();
        assert!(matches!(
            forward(&spec, &wv, &ws, &mut g, &[x]),
            Err(NetError::WidthMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn archive_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pinn");
        let spec = MLPSpec::new(2, vec![7, 3], Activation::Sin).unwrap();
        let ws = init_glorot(&spec, 1234);
        save(&ws, &spec, &path).unwrap();
        let (spec2, ws2) = load(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(ws.seed, ws2.seed);
        assert_eq!(ws.layout, ws2.layout);
        assert!(ws.flat.iter().zip(&ws2.flat).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_archive_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pinn");
        let spec = MLPSpec::new(1, vec![2], Activation::Tanh).unwrap();
        let ws = init_glorot(&spec, 0);
        save(&ws, &spec, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&path), Err(NetError::CorruptArchive(_))));
    }

    #[test]
    fn version_mismatch_names_supported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pinn");
        let spec = MLPSpec::new(1, vec![2], Activation::Tanh).unwrap();
        let ws = init_glorot(&spec, 0);
        save(&ws, &spec, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(NetError::VersionMismatch { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, "1");
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pinn");
        let spec = MLPSpec::new(1, vec![2], Activation::Tanh).unwrap();
        let ws = init_glorot(&spec, 0);
        save(&ws, &spec, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(NetError::CorruptArchive(_))));
    }
}
