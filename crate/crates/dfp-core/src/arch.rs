//! Architecture descriptions: layer geometry, connectivity edges, and the
//! canonical family classification that fixes the induced dictionary
//! structure.
//!
//! An [`ArchSpec`] is validated on construction, so every instance handed
//! to the other modules is structurally sound. The family tag is always
//! the *detected* one: an edge set that is exactly the adjacent learned
//! chain is a chain, all-pairs learned edges are the dense family, chain
//! edges plus the alternating identity skips are residual, and anything
//! else is custom.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Geometry of one layer (or of the input, treated as layer 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerGeom {
    Dense {
        units: usize,
    },
    Conv {
        /// Spatial extent per dimension (1 or 2 dims).
        spatial: Vec<usize>,
        in_channels: usize,
        out_channels: usize,
        /// Kernel extent per dimension; odd and no larger than the extent.
        kernel: Vec<usize>,
        /// Stride per dimension; divides the extent exactly.
        stride: Vec<usize>,
    },
}

impl LayerGeom {
    pub fn dense(units: usize) -> Self {
        LayerGeom::Dense { units }
    }

    pub fn conv(
        spatial: Vec<usize>,
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<usize>,
        stride: Vec<usize>,
    ) -> Self {
        LayerGeom::Conv {
            spatial,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    /// Input-shaped conv geometry: a spatial grid of channels with no
    /// transformation attached (kernel 1, stride 1).
    pub fn conv_input(spatial: Vec<usize>, channels: usize) -> Self {
        let dims = spatial.len();
        LayerGeom::Conv {
            spatial,
            in_channels: channels,
            out_channels: channels,
            kernel: vec![1; dims],
            stride: vec![1; dims],
        }
    }

    /// Effective unit count: what later layers see as this layer's width.
    pub fn units(&self) -> usize {
        match self {
            LayerGeom::Dense { units } => *units,
            LayerGeom::Conv {
                spatial,
                out_channels,
                stride,
                ..
            } => {
                out_channels
                    * spatial
                        .iter()
                        .zip(stride.iter())
                        .map(|(s, t)| s / t)
                        .product::<usize>()
            }
        }
    }

    /// For conv layers, the intrinsic input dimensionality
    /// (`in_channels * spatial volume`); dense layers accept any input size.
    pub fn conv_input_units(&self) -> Option<usize> {
        match self {
            LayerGeom::Dense { .. } => None,
            LayerGeom::Conv {
                spatial,
                in_channels,
                ..
            } => Some(in_channels * spatial.iter().product::<usize>()),
        }
    }

    /// Spatial extents after striding, when conv.
    pub fn out_spatial(&self) -> Option<Vec<usize>> {
        match self {
            LayerGeom::Dense { .. } => None,
            LayerGeom::Conv {
                spatial, stride, ..
            } => Some(spatial.iter().zip(stride.iter()).map(|(s, t)| s / t).collect()),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerGeom::Conv { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Learned,
    Identity,
}

/// Connection from the output of `src` (0 = input) into layer `dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn learned(src: usize, dst: usize) -> Self {
        Edge {
            src,
            dst,
            kind: EdgeKind::Learned,
        }
    }

    pub fn identity(src: usize, dst: usize) -> Self {
        Edge {
            src,
            dst,
            kind: EdgeKind::Identity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Chain,
    Residual,
    Dense,
    Custom,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Chain => "chain",
            Family::Residual => "residual",
            Family::Dense => "dense",
            Family::Custom => "custom",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpecError {
    NoLayers,
    ZeroWidth {
        layer: usize,
    },
    BadConvGeom {
        layer: usize,
        reason: String,
    },
    NonFeedForward {
        index: usize,
        src: usize,
        dst: usize,
    },
    DanglingEdge {
        index: usize,
        src: usize,
        dst: usize,
    },
    DuplicateEdge {
        index: usize,
        src: usize,
        dst: usize,
    },
    MissingIncoming {
        layer: usize,
    },
    IdentityDimMismatch {
        index: usize,
        src_units: usize,
        dst_rows: usize,
    },
    /// Identity diagonal blocks need a square slot: layer width must match
    /// the layer's row space.
    NonSquareDiagonal {
        layer: usize,
        rows: usize,
        cols: usize,
    },
    /// Learned off-diagonal blocks between conv layers have no defined
    /// kernel geometry; only chain-position (diagonal) conv blocks carry
    /// filters.
    ConvSkipUnsupported {
        index: usize,
    },
    /// An input skip `(0, dst)` with `dst > 1` is only representable in the
    /// dense family's all-pairs pattern.
    InputSkipUnsupported {
        index: usize,
    },
    UnitMismatch {
        layer: usize,
        expected_inputs: usize,
        source_units: usize,
    },
    SpatialMismatch {
        layer: usize,
    },
    FamilyMismatch {
        declared: Family,
        detected: Family,
    },
    BadDepth {
        depth: usize,
    },
    BadFamilyForExpansion,
    NegativeLambda,
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::NoLayers => write!(f, "spec has no layers"),
            SpecError::ZeroWidth { layer } => write!(f, "layer {layer} has zero width"),
            SpecError::BadConvGeom { layer, reason } => {
                write!(f, "layer {layer} conv geometry invalid: {reason}")
            }
            SpecError::NonFeedForward { index, src, dst } => {
                write!(f, "edge {index} ({src} -> {dst}) is not feed-forward")
            }
            SpecError::DanglingEdge { index, src, dst } => {
                write!(f, "edge {index} ({src} -> {dst}) references a missing layer")
            }
            SpecError::DuplicateEdge { index, src, dst } => {
                write!(f, "edge {index} duplicates connection {src} -> {dst}")
            }
            SpecError::MissingIncoming { layer } => {
                write!(f, "layer {layer} has no incoming edge")
            }
            SpecError::IdentityDimMismatch {
                index,
                src_units,
                dst_rows,
            } => write!(
                f,
                "identity edge {index}: source width {src_units} != destination row space {dst_rows}"
            ),
            SpecError::NonSquareDiagonal { layer, rows, cols } => write!(
                f,
                "layer {layer} needs an identity diagonal block but is {rows} x {cols}"
            ),
            SpecError::ConvSkipUnsupported { index } => write!(
                f,
                "edge {index}: learned skip blocks touching conv layers are unsupported"
            ),
            SpecError::InputSkipUnsupported { index } => write!(
                f,
                "edge {index}: input skips (src 0, dst > 1) are only supported by the dense family"
            ),
            SpecError::UnitMismatch {
                layer,
                expected_inputs,
                source_units,
            } => write!(
                f,
                "layer {layer} expects {expected_inputs} inputs but its source provides {source_units}"
            ),
            SpecError::SpatialMismatch { layer } => write!(
                f,
                "layer {layer} spatial grid does not match its source's output grid"
            ),
            SpecError::FamilyMismatch { declared, detected } => write!(
                f,
                "declared family {declared} but the edge set is {detected}"
            ),
            SpecError::BadDepth { depth } => write!(f, "depth {depth} is out of range"),
            SpecError::BadFamilyForExpansion => {
                write!(f, "custom family cannot be expanded from depth/width")
            }
            SpecError::NegativeLambda => write!(f, "lambda must be nonnegative"),
        }
    }
}

impl core::error::Error for SpecError {}

/// Validated architecture description. Construction canonicalizes the edge
/// order and detects the family, so downstream modules never re-check.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    input: LayerGeom,
    layers: Vec<LayerGeom>,
    edges: Vec<Edge>,
    family: Family,
    lambda: f64,
}

impl ArchSpec {
    pub fn new(
        input: LayerGeom,
        layers: Vec<LayerGeom>,
        mut edges: Vec<Edge>,
        lambda: f64,
    ) -> Result<Self, SpecError> {
        edges.sort_by_key(|e| (e.dst, e.src));
        let spec = ArchSpec {
            input,
            layers,
            edges,
            family: Family::Custom,
            lambda,
        };
        spec.finish_validation(None)
    }

    /// Like [`ArchSpec::new`] but checks the declared family against the
    /// detected one.
    pub fn with_family(
        input: LayerGeom,
        layers: Vec<LayerGeom>,
        mut edges: Vec<Edge>,
        lambda: f64,
        declared: Family,
    ) -> Result<Self, SpecError> {
        edges.sort_by_key(|e| (e.dst, e.src));
        let spec = ArchSpec {
            input,
            layers,
            edges,
            family: Family::Custom,
            lambda,
        };
        spec.finish_validation(Some(declared))
    }

    fn finish_validation(mut self, declared: Option<Family>) -> Result<Self, SpecError> {
        validate_geoms(&self.input, &self.layers)?;
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(SpecError::NegativeLambda);
        }
        validate_edges(&self.layers, &self.edges)?;
        let detected = detect_family(self.layers.len(), &self.edges);
        if let Some(decl) = declared {
            // A declared custom tag is allowed to match any detected
            // pattern; named tags must agree exactly.
            if decl != Family::Custom && decl != detected {
                return Err(SpecError::FamilyMismatch {
                    declared: decl,
                    detected,
                });
            }
        }
        self.family = detected;
        validate_structure(&self)?;
        Ok(self)
    }

    pub fn input(&self) -> &LayerGeom {
        &self.input
    }

    pub fn layers(&self) -> &[LayerGeom] {
        &self.layers
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Width of the output of layer `j` (0 = input).
    pub fn width(&self, j: usize) -> usize {
        if j == 0 {
            self.input.units()
        } else {
            self.layers[j - 1].units()
        }
    }

    /// Row-space dimension of column block `j` (1-based): `k_{j-1}`, the
    /// width of whatever feeds layer `j`.
    pub fn row_dim(&self, j: usize) -> usize {
        self.width(j - 1)
    }

    /// Widths `k_0 .. k_l` as a flat vector.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.layers.len() + 1);
        w.push(self.input.units());
        w.extend(self.layers.iter().map(|g| g.units()));
        w
    }

    /// Geometry feeding layer `j` (1-based): the input for `j = 1`,
    /// otherwise layer `j - 1`.
    pub fn geom_before(&self, j: usize) -> &LayerGeom {
        if j == 1 {
            &self.input
        } else {
            &self.layers[j - 2]
        }
    }

    /// Total free parameters: the sum over learned blocks of the induced
    /// dictionary (identity edges contribute nothing).
    pub fn param_count(&self) -> usize {
        crate::dict::grid_param_count(self)
    }
}

fn validate_one_geom(geom: &LayerGeom, layer: usize) -> Result<(), SpecError> {
    match geom {
        LayerGeom::Dense { units } => {
            if *units == 0 {
                return Err(SpecError::ZeroWidth { layer });
            }
        }
        LayerGeom::Conv {
            spatial,
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let bad = |reason: String| SpecError::BadConvGeom { layer, reason };
            if spatial.is_empty() || spatial.len() > 2 {
                return Err(bad(format!("{} spatial dims (must be 1 or 2)", spatial.len())));
            }
            if kernel.len() != spatial.len() || stride.len() != spatial.len() {
                return Err(bad("kernel/stride dimensionality mismatch".into()));
            }
            if *in_channels == 0 || *out_channels == 0 {
                return Err(SpecError::ZeroWidth { layer });
            }
            for d in 0..spatial.len() {
                if spatial[d] == 0 {
                    return Err(SpecError::ZeroWidth { layer });
                }
                if kernel[d] % 2 == 0 || kernel[d] == 0 {
                    return Err(bad(format!("kernel extent {} is not odd", kernel[d])));
                }
                if kernel[d] > spatial[d] {
                    return Err(bad(format!(
                        "kernel extent {} exceeds spatial extent {}",
                        kernel[d], spatial[d]
                    )));
                }
                if stride[d] == 0 || spatial[d] % stride[d] != 0 {
                    return Err(bad(format!(
                        "stride {} does not divide spatial extent {}",
                        stride[d], spatial[d]
                    )));
                }
            }
        }
    }
    Ok(())
}

fn validate_geoms(input: &LayerGeom, layers: &[LayerGeom]) -> Result<(), SpecError> {
    if layers.is_empty() {
        return Err(SpecError::NoLayers);
    }
    validate_one_geom(input, 0)?;
    for (i, geom) in layers.iter().enumerate() {
        validate_one_geom(geom, i + 1)?;
    }
    Ok(())
}

fn validate_edges(layers: &[LayerGeom], edges: &[Edge]) -> Result<(), SpecError> {
    let l = layers.len();
    let mut seen = vec![false; (l + 1) * (l + 1)];
    let mut incoming = vec![false; l + 1];
    for (index, e) in edges.iter().enumerate() {
        if e.src > l || e.dst > l || e.dst == 0 {
            return Err(SpecError::DanglingEdge {
                index,
                src: e.src,
                dst: e.dst,
            });
        }
        if e.src >= e.dst {
            return Err(SpecError::NonFeedForward {
                index,
                src: e.src,
                dst: e.dst,
            });
        }
        let slot = e.src * (l + 1) + e.dst;
        if seen[slot] {
            return Err(SpecError::DuplicateEdge {
                index,
                src: e.src,
                dst: e.dst,
            });
        }
        seen[slot] = true;
        incoming[e.dst] = true;
    }
    for j in 1..=l {
        if !incoming[j] {
            return Err(SpecError::MissingIncoming { layer: j });
        }
    }
    Ok(())
}

/// Classifies an edge set. Chain: exactly adjacent learned edges. Dense:
/// all pairs learned. Residual: adjacent learned plus identity skips
/// `(j-1, j+1)` at even `j`. Everything else is custom.
fn detect_family(l: usize, edges: &[Edge]) -> Family {
    let chain: Vec<Edge> = (1..=l).map(|j| Edge::learned(j - 1, j)).collect();
    let mut sorted = edges.to_vec();
    sorted.sort_by_key(|e| (e.dst, e.src));
    if sorted == chain {
        return Family::Chain;
    }
    let mut dense = Vec::new();
    for dst in 1..=l {
        for src in 0..dst {
            dense.push(Edge::learned(src, dst));
        }
    }
    if sorted == dense {
        return Family::Dense;
    }
    let mut residual = chain;
    let mut j = 2;
    while j < l {
        residual.push(Edge::identity(j - 1, j + 1));
        j += 2;
    }
    residual.sort_by_key(|e| (e.dst, e.src));
    if sorted == residual {
        return Family::Residual;
    }
    Family::Custom
}

/// Family-aware structural checks (square identity slots, conv chaining,
/// which positions may carry learned conv payloads).
fn validate_structure(spec: &ArchSpec) -> Result<(), SpecError> {
    let l = spec.depth();
    // Geometry chaining along the spine: a conv layer's intrinsic input
    // space must be the output space of whatever feeds it.
    for j in 1..=l {
        let prev = spec.geom_before(j);
        let here = &spec.layers[j - 1];
        if let Some(expected) = here.conv_input_units() {
            if expected != prev.units() {
                return Err(SpecError::UnitMismatch {
                    layer: j,
                    expected_inputs: expected,
                    source_units: prev.units(),
                });
            }
            if let (LayerGeom::Conv { spatial, .. }, Some(prev_out)) = (here, prev.out_spatial()) {
                if *spatial != prev_out {
                    return Err(SpecError::SpatialMismatch { layer: j });
                }
            }
        }
    }

    match spec.family {
        Family::Chain => {}
        Family::Residual => {
            for j in 2..=l {
                let rows = spec.row_dim(j);
                let cols = spec.width(j);
                if rows != cols {
                    return Err(SpecError::NonSquareDiagonal {
                        layer: j,
                        rows,
                        cols,
                    });
                }
                // Learned sub-diagonal blocks are dense payloads.
                if spec.layers[j - 1].is_conv() {
                    let index = spec
                        .edges
                        .iter()
                        .position(|e| e.dst == j && e.kind == EdgeKind::Learned)
                        .unwrap_or(0);
                    return Err(SpecError::ConvSkipUnsupported { index });
                }
            }
            for (index, e) in spec.edges.iter().enumerate() {
                if e.kind == EdgeKind::Identity {
                    let src_units = spec.width(e.src);
                    let dst_rows = spec.row_dim(e.dst);
                    if src_units != dst_rows {
                        return Err(SpecError::IdentityDimMismatch {
                            index,
                            src_units,
                            dst_rows,
                        });
                    }
                }
            }
        }
        Family::Dense => {
            if l >= 2 {
                for (j, geom) in spec.layers.iter().enumerate() {
                    if geom.is_conv() {
                        let index = spec
                            .edges
                            .iter()
                            .position(|e| e.dst == j + 1)
                            .unwrap_or(0);
                        return Err(SpecError::ConvSkipUnsupported { index });
                    }
                }
            }
        }
        Family::Custom => {
            for (index, e) in spec.edges.iter().enumerate() {
                if e.src == 0 && e.dst > 1 {
                    return Err(SpecError::InputSkipUnsupported { index });
                }
                match e.kind {
                    EdgeKind::Identity => {
                        let src_units = spec.width(e.src);
                        let dst_rows = spec.row_dim(e.dst);
                        if src_units != dst_rows {
                            return Err(SpecError::IdentityDimMismatch {
                                index,
                                src_units,
                                dst_rows,
                            });
                        }
                    }
                    EdgeKind::Learned => {
                        // Cells below the diagonal are dense payloads; conv
                        // filter geometry only exists on the diagonal.
                        let is_diagonal_cell = e.src == 0 && e.dst == 1;
                        if !is_diagonal_cell && spec.layers[e.dst - 1].is_conv() {
                            return Err(SpecError::ConvSkipUnsupported { index });
                        }
                    }
                }
            }
            // Every column except possibly the first carries an identity
            // diagonal block in the general skip form.
            for j in 2..=l {
                let rows = spec.row_dim(j);
                let cols = spec.width(j);
                if rows != cols {
                    return Err(SpecError::NonSquareDiagonal {
                        layer: j,
                        rows,
                        cols,
                    });
                }
            }
            if let Some((index, e)) = spec
                .edges
                .iter()
                .enumerate()
                .find(|(_, e)| e.src == 0 && e.dst == 1 && e.kind == EdgeKind::Identity)
            {
                if spec.width(0) != spec.row_dim(1) || spec.width(0) != spec.width(1) {
                    return Err(SpecError::IdentityDimMismatch {
                        index,
                        src_units: spec.width(0),
                        dst_rows: spec.width(e.dst),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Builds a named family over explicit widths `k_0 .. k_l`.
pub fn family_spec(family: Family, widths: &[usize], lambda: f64) -> Result<ArchSpec, SpecError> {
    if widths.len() < 2 {
        return Err(SpecError::NoLayers);
    }
    let l = widths.len() - 1;
    let input = LayerGeom::dense(widths[0]);
    let layers: Vec<LayerGeom> = widths[1..].iter().map(|&w| LayerGeom::dense(w)).collect();
    let mut edges: Vec<Edge> = (1..=l).map(|j| Edge::learned(j - 1, j)).collect();
    match family {
        Family::Chain => {}
        Family::Residual => {
            let mut j = 2;
            while j < l {
                edges.push(Edge::identity(j - 1, j + 1));
                j += 2;
            }
        }
        Family::Dense => {
            edges.clear();
            for dst in 1..=l {
                for src in 0..dst {
                    edges.push(Edge::learned(src, dst));
                }
            }
        }
        Family::Custom => return Err(SpecError::BadFamilyForExpansion),
    }
    ArchSpec::new(input, layers, edges, lambda)
}

/// Deterministic family expansion at uniform width.
pub fn expand_family(family: Family, depth: usize, width: usize) -> Result<ArchSpec, SpecError> {
    if depth == 0 {
        return Err(SpecError::BadDepth { depth });
    }
    if width == 0 {
        return Err(SpecError::ZeroWidth { layer: 1 });
    }
    let widths = vec![width; depth + 1];
    family_spec(family, &widths, 0.1)
}
