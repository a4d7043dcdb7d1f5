//! JSON spec documents: parsing with field-path error reporting, and the
//! canonical serialization (`parse . serialize = id` on canonical specs).
//!
//! Schema:
//! `{"family": string, "widths": [int], "input": {...}, "layers": [...],
//!   "edges": [{"src","dst","kind"}], "lambda": number}`.
//! Shorthand documents give `family` + `widths` and omit layers/edges;
//! explicit documents give `input` + `layers` + `edges` (family optional,
//! checked when present).

use std::fmt;

use serde::{Deserialize, Serialize};

use dfp_core::arch::{family_spec, ArchSpec, Edge, EdgeKind, Family, LayerGeom, SpecError};

#[derive(Debug)]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for SchemaError {}

fn err(path: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<GeomDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<GeomDoc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<EdgeDoc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeomDoc {
    Dense {
        units: usize,
    },
    Conv {
        spatial: Vec<usize>,
        /// Input shorthand: a grid of channels with no transformation.
        #[serde(skip_serializing_if = "Option::is_none")]
        channels: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        in_channels: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        out_channels: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        kernel: Option<Vec<usize>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        stride: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub src: usize,
    pub dst: usize,
    pub kind: String,
}

const DEFAULT_LAMBDA: f64 = 0.1;

fn geom_from_doc(doc: &GeomDoc, path: &str) -> Result<LayerGeom, SchemaError> {
    match doc {
        GeomDoc::Dense { units } => Ok(LayerGeom::dense(*units)),
        GeomDoc::Conv {
            spatial,
            channels,
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            if let Some(ch) = channels {
                if in_channels.is_some() || out_channels.is_some() || kernel.is_some() {
                    return Err(err(
                        format!("{path}.channels"),
                        "channels shorthand excludes in_channels/out_channels/kernel",
                    ));
                }
                return Ok(LayerGeom::conv_input(spatial.clone(), *ch));
            }
            let in_ch = in_channels
                .ok_or_else(|| err(format!("{path}.in_channels"), "missing"))?;
            let out_ch = out_channels
                .ok_or_else(|| err(format!("{path}.out_channels"), "missing"))?;
            let kernel = kernel
                .clone()
                .ok_or_else(|| err(format!("{path}.kernel"), "missing"))?;
            let stride = stride.clone().unwrap_or_else(|| vec![1; spatial.len()]);
            Ok(LayerGeom::conv(spatial.clone(), in_ch, out_ch, kernel, stride))
        }
    }
}

fn geom_to_doc(geom: &LayerGeom, as_input: bool) -> GeomDoc {
    match geom {
        LayerGeom::Dense { units } => GeomDoc::Dense { units: *units },
        LayerGeom::Conv {
            spatial,
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            if as_input && in_channels == out_channels && kernel.iter().all(|&k| k == 1) {
                GeomDoc::Conv {
                    spatial: spatial.clone(),
                    channels: Some(*in_channels),
                    in_channels: None,
                    out_channels: None,
                    kernel: None,
                    stride: None,
                }
            } else {
                GeomDoc::Conv {
                    spatial: spatial.clone(),
                    channels: None,
                    in_channels: Some(*in_channels),
                    out_channels: Some(*out_channels),
                    kernel: Some(kernel.clone()),
                    stride: Some(stride.clone()),
                }
            }
        }
    }
}

pub fn family_from_name(name: &str) -> Option<Family> {
    match name {
        "chain" => Some(Family::Chain),
        "residual" | "resnet" => Some(Family::Residual),
        "dense" | "densenet" => Some(Family::Dense),
        "custom" => Some(Family::Custom),
        _ => None,
    }
}

/// Maps core validation errors onto schema field paths.
fn spec_error_path(e: &SpecError) -> SchemaError {
    let path = match e {
        SpecError::NoLayers => "layers".to_string(),
        SpecError::ZeroWidth { layer } | SpecError::BadConvGeom { layer, .. } => {
            if *layer == 0 {
                "input".to_string()
            } else {
                format!("layers[{}]", layer - 1)
            }
        }
        SpecError::NonFeedForward { index, .. }
        | SpecError::DanglingEdge { index, .. }
        | SpecError::DuplicateEdge { index, .. }
        | SpecError::IdentityDimMismatch { index, .. }
        | SpecError::ConvSkipUnsupported { index }
        | SpecError::InputSkipUnsupported { index } => format!("edges[{index}]"),
        SpecError::MissingIncoming { layer } => format!("layers[{}]", layer - 1),
        SpecError::UnitMismatch { layer, .. } | SpecError::SpatialMismatch { layer } => {
            format!("layers[{}]", layer - 1)
        }
        SpecError::NonSquareDiagonal { layer, .. } => format!("layers[{}]", layer - 1),
        SpecError::FamilyMismatch { .. } => "family".to_string(),
        SpecError::BadDepth { .. } | SpecError::BadFamilyForExpansion => "family".to_string(),
        SpecError::NegativeLambda => "lambda".to_string(),
    };
    err(path, e.to_string())
}

/// Parses and validates a spec document.
pub fn parse_spec(text: &str) -> Result<ArchSpec, SchemaError> {
    let doc: SpecDoc =
        serde_json::from_str(text).map_err(|e| err("$", format!("malformed JSON: {e}")))?;
    spec_from_doc(&doc)
}

pub fn spec_from_doc(doc: &SpecDoc) -> Result<ArchSpec, SchemaError> {
    let lambda = doc.lambda.unwrap_or(DEFAULT_LAMBDA);
    let explicit = doc.layers.is_some() || doc.edges.is_some() || doc.input.is_some();
    if let Some(widths) = &doc.widths {
        if explicit {
            return Err(err(
                "widths",
                "widths shorthand cannot be combined with input/layers/edges",
            ));
        }
        let name = doc
            .family
            .as_deref()
            .ok_or_else(|| err("family", "missing (required with widths)"))?;
        let family = family_from_name(name)
            .ok_or_else(|| err("family", format!("unknown family {name:?}")))?;
        if family == Family::Custom {
            return Err(err("family", "custom specs need explicit layers/edges"));
        }
        return family_spec(family, widths, lambda).map_err(|e| spec_error_path(&e));
    }

    let input_doc = doc
        .input
        .as_ref()
        .ok_or_else(|| err("input", "missing"))?;
    let layer_docs = doc
        .layers
        .as_ref()
        .ok_or_else(|| err("layers", "missing"))?;
    let edge_docs = doc
        .edges
        .as_ref()
        .ok_or_else(|| err("edges", "missing"))?;

    let input = geom_from_doc(input_doc, "input")?;
    let mut layers = Vec::with_capacity(layer_docs.len());
    for (i, ld) in layer_docs.iter().enumerate() {
        layers.push(geom_from_doc(ld, &format!("layers[{i}]"))?);
    }
    let mut edges = Vec::with_capacity(edge_docs.len());
    for (i, ed) in edge_docs.iter().enumerate() {
        let kind = match ed.kind.as_str() {
            "learned" => EdgeKind::Learned,
            "identity" => EdgeKind::Identity,
            other => {
                return Err(err(
                    format!("edges[{i}].kind"),
                    format!("unknown edge kind {other:?}"),
                ))
            }
        };
        edges.push(Edge {
            src: ed.src,
            dst: ed.dst,
            kind,
        });
    }

    match &doc.family {
        Some(name) => {
            let family = family_from_name(name)
                .ok_or_else(|| err("family", format!("unknown family {name:?}")))?;
            ArchSpec::with_family(input, layers, edges, lambda, family)
                .map_err(|e| spec_error_path(&e))
        }
        None => ArchSpec::new(input, layers, edges, lambda).map_err(|e| spec_error_path(&e)),
    }
}

pub fn spec_to_doc(spec: &ArchSpec) -> SpecDoc {
    SpecDoc {
        family: Some(spec.family().as_str().to_string()),
        widths: None,
        input: Some(geom_to_doc(spec.input(), true)),
        layers: Some(spec.layers().iter().map(|g| geom_to_doc(g, false)).collect()),
        edges: Some(
            spec.edges()
                .iter()
                .map(|e| EdgeDoc {
                    src: e.src,
                    dst: e.dst,
                    kind: match e.kind {
                        EdgeKind::Learned => "learned".to_string(),
                        EdgeKind::Identity => "identity".to_string(),
                    },
                })
                .collect(),
        ),
        lambda: Some(spec.lambda()),
    }
}

/// Canonical compact JSON form; hashing and cache keys run over this.
pub fn serialize_spec(spec: &ArchSpec) -> String {
    serde_json::to_string(&spec_to_doc(spec)).expect("spec doc serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shorthand_chain() {
        let spec = parse_spec(r#"{"family":"chain","widths":[2,3,2]}"#).unwrap();
        assert_eq!(spec.family(), Family::Chain);
        assert_eq!(spec.widths(), vec![2, 3, 2]);
        assert_eq!(spec.lambda(), 0.1);
    }

    #[test]
    fn shorthand_resnet_and_densenet() {
        let spec = parse_spec(r#"{"family":"resnet","widths":[4,4,4,4]}"#).unwrap();
        assert_eq!(spec.family(), Family::Residual);
        assert_eq!(spec.edges().len(), 4);

        let spec = parse_spec(r#"{"family":"densenet","widths":[4,4,4,4],"lambda":0.3}"#).unwrap();
        assert_eq!(spec.family(), Family::Dense);
        assert_eq!(spec.edges().len(), 6);
        assert_eq!(spec.lambda(), 0.3);
    }

    #[test]
    fn explicit_spec_round_trip() {
        let text = r#"{
            "input": {"kind": "dense", "units": 3},
            "layers": [{"kind": "dense", "units": 4}, {"kind": "dense", "units": 3}],
            "edges": [{"src":0,"dst":1,"kind":"learned"},{"src":1,"dst":2,"kind":"learned"}],
            "lambda": 0.2
        }"#;
        let spec = parse_spec(text).unwrap();
        assert_eq!(spec.family(), Family::Chain);
        let canon = serialize_spec(&spec);
        let again = parse_spec(&canon).unwrap();
        assert_eq!(spec, again);
        assert_eq!(canon, serialize_spec(&again));
    }

    #[test]
    fn conv_round_trip() {
        let text = r#"{
            "input": {"kind": "conv", "spatial": [8], "channels": 2},
            "layers": [{"kind": "conv", "spatial": [8], "in_channels": 2,
                        "out_channels": 5, "kernel": [3]}],
            "edges": [{"src":0,"dst":1,"kind":"learned"}]
        }"#;
        let spec = parse_spec(text).unwrap();
        assert_eq!(spec.param_count(), 30);
        let again = parse_spec(&serialize_spec(&spec)).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn error_paths() {
        let e = parse_spec("{nope").unwrap_err();
        assert_eq!(e.path, "$");

        let e = parse_spec(r#"{"family":"ladder","widths":[2,2]}"#).unwrap_err();
        assert_eq!(e.path, "family");

        let e = parse_spec(
            r#"{"input":{"kind":"dense","units":2},
                "layers":[{"kind":"dense","units":2}],
                "edges":[{"src":0,"dst":5,"kind":"learned"}]}"#,
        )
        .unwrap_err();
        assert_eq!(e.path, "edges[0]");

        let e = parse_spec(
            r#"{"input":{"kind":"dense","units":4},
                "layers":[{"kind":"dense","units":4},{"kind":"dense","units":4},{"kind":"dense","units":3}],
                "edges":[{"src":0,"dst":1,"kind":"learned"},{"src":1,"dst":2,"kind":"learned"},
                         {"src":2,"dst":3,"kind":"learned"},{"src":1,"dst":3,"kind":"identity"}]}"#,
        )
        .unwrap_err();
        assert!(e.path.starts_with("edges[") || e.path.starts_with("layers["), "{e}");

        let e = parse_spec(
            r#"{"input":{"kind":"dense","units":2},
                "layers":[{"kind":"dense","units":2}],
                "edges":[{"src":1,"dst":1,"kind":"learned"}]}"#,
        )
        .unwrap_err();
        assert_eq!(e.path, "edges[0]");
    }

    #[test]
    fn declared_family_is_checked() {
        let e = parse_spec(
            r#"{"family":"densenet",
                "input":{"kind":"dense","units":2},
                "layers":[{"kind":"dense","units":3}],
                "edges":[{"src":0,"dst":1,"kind":"learned"}]}"#,
        )
        .unwrap_err();
        assert_eq!(e.path, "family");
    }
}
