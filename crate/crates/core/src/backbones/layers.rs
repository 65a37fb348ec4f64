//! Published layer names per architecture and the candidate taps studied for
//! layer selection. Names follow the MatConvNet conventions of the imported
//! models: a trailing `x` marks batch normalization after a branch
//! convolution, and ReLU after a residual sum.

use serde::{Deserialize, Serialize};

use super::Family;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLayer {
    pub name: String,
    pub stage: String,
    pub operation: String,
}

fn candidate(name: &str, stage: &str, operation: &str) -> CandidateLayer {
    CandidateLayer {
        name: name.to_string(),
        stage: stage.to_string(),
        operation: operation.to_string(),
    }
}

/// Block suffixes within one ResNet stage: letters for short stages, `a, b1..`
/// for the long stages of the deeper variants.
fn block_names(stage: usize, blocks: usize, numbered: bool) -> Vec<String> {
    (0..blocks)
        .map(|i| {
            if !numbered {
                format!("res{stage}{}", (b'a' + i as u8) as char)
            } else if i == 0 {
                format!("res{stage}a")
            } else {
                format!("res{stage}b{i}")
            }
        })
        .collect()
}

fn resnet_layers(blocks: [usize; 4], numbered: [bool; 4]) -> Vec<String> {
    let mut out: Vec<String> = ["conv1", "bn_conv1", "conv1_relu", "pool1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (i, (&n, &num)) in blocks.iter().zip(&numbered).enumerate() {
        let stage = i + 2;
        for (j, block) in block_names(stage, n, num).into_iter().enumerate() {
            if j == 0 {
                out.push(format!("{block}_branch1"));
                out.push(format!("{block}_branch1x"));
            }
            for b in ["2a", "2b", "2c"] {
                out.push(format!("{block}_branch{b}"));
                out.push(format!("{block}_branch{b}x"));
            }
            out.push(block.clone());
            out.push(format!("{block}x"));
        }
    }
    out.extend(["pool5", "fc1000", "prob"].iter().map(|s| s.to_string()));
    out
}

fn vgg_layers(convs_per_group: [usize; 5]) -> Vec<String> {
    let mut out = Vec::new();
    for (g, &n) in convs_per_group.iter().enumerate() {
        let g = g + 1;
        for k in 1..=n {
            out.push(format!("conv{g}_{k}"));
            out.push(format!("relu{g}_{k}"));
        }
        out.push(format!("pool{g}"));
    }
    out.extend(
        ["fc6", "relu6", "fc7", "relu7", "fc8", "prob"]
            .iter()
            .map(|s| s.to_string()),
    );
    out
}

fn alexnet_layers() -> Vec<String> {
    [
        "conv1", "relu1", "norm1", "pool1", "conv2", "relu2", "norm2", "pool2", "conv3", "relu3",
        "conv4", "relu4", "conv5", "relu5", "pool5", "fc6", "relu6", "fc7", "relu7", "fc8", "prob",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Every layer name a tap may reference for `family`, in network order.
pub fn published_layers(family: Family) -> Vec<String> {
    match family {
        Family::Alexnet => alexnet_layers(),
        Family::Vgg16 => vgg_layers([2, 2, 3, 3, 3]),
        Family::Vgg19 => vgg_layers([2, 2, 4, 4, 4]),
        Family::Resnet50 => resnet_layers([3, 4, 6, 3], [false; 4]),
        Family::Resnet101 => resnet_layers([3, 4, 23, 3], [false, true, true, false]),
        Family::Resnet152 => resnet_layers([3, 8, 36, 3], [false, true, true, false]),
    }
}

fn resnet_candidates(last4: &str) -> Vec<CandidateLayer> {
    vec![
        candidate(&format!("{last4}_branch2c"), "4th", "Convolution"),
        candidate(&format!("{last4}_branch2cx"), "4th", "Batch Normalization"),
        candidate(last4, "4th", "Residual Connection"),
        candidate(&format!("{last4}x"), "4th", "ReLU"),
        candidate("res5c_branch2c", "5th", "Convolution"),
        candidate("res5c_branch2cx", "5th", "Batch Normalization"),
        candidate("res5c", "5th", "Residual Connection"),
        candidate("res5cx", "5th", "ReLU"),
        candidate("pool5", "Final", "Average Pooling"),
    ]
}

fn vgg_candidates(last_conv: &str) -> Vec<CandidateLayer> {
    let relu = last_conv.replace("conv", "relu");
    vec![
        candidate(last_conv, "5th", "Convolution"),
        candidate(&relu, "5th", "ReLU"),
        candidate("pool5", "5th", "Max Pooling"),
        candidate("fc6", "Classifier", "Fully Connected"),
        candidate("relu6", "Classifier", "ReLU"),
        candidate("fc7", "Classifier", "Fully Connected"),
        candidate("relu7", "Classifier", "ReLU"),
    ]
}

/// Layers compared in the tap-selection study, with stage and operation labels.
pub fn list_candidate_layers(family: Family) -> Vec<CandidateLayer> {
    match family {
        Family::Resnet50 => resnet_candidates("res4f"),
        Family::Resnet101 => resnet_candidates("res4b22"),
        Family::Resnet152 => resnet_candidates("res4b35"),
        Family::Vgg16 => vgg_candidates("conv5_3"),
        Family::Vgg19 => vgg_candidates("conv5_4"),
        Family::Alexnet => vec![
            candidate("conv5", "5th", "Convolution"),
            candidate("relu5", "5th", "ReLU"),
            candidate("pool5", "5th", "Max Pooling"),
            candidate("fc6", "Classifier", "Fully Connected"),
            candidate("relu6", "Classifier", "ReLU"),
            candidate("fc7", "Classifier", "Fully Connected"),
            candidate("relu7", "Classifier", "ReLU"),
        ],
    }
}

/// Where a published layer sits, at the resolution of the stand-in network:
/// stage 0 is the stem, 1..=4 the downsampling stages, and the remaining
/// variants the pooled and dense tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapPoint {
    Conv(usize),
    Norm(usize),
    Residual(usize),
    Relu(usize),
    Pool(usize),
    GlobalPool,
    Dense(usize),
    DenseRelu(usize),
}

fn digit_after(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.chars().next()?.to_digit(10).map(|d| d as usize)
}

/// Maps a published layer of `family` onto the stand-in's tap points.
pub fn tap_point(family: Family, layer: &str) -> TapPoint {
    match family {
        Family::Resnet50 | Family::Resnet101 | Family::Resnet152 => match layer {
            "conv1" => TapPoint::Conv(0),
            "bn_conv1" => TapPoint::Norm(0),
            "conv1_relu" => TapPoint::Relu(0),
            "pool1" => TapPoint::Pool(0),
            "pool5" => TapPoint::GlobalPool,
            "fc1000" | "prob" => TapPoint::Dense(3),
            _ => {
                let stage = digit_after(layer, "res").map_or(4, |s| s.saturating_sub(1).clamp(1, 4));
                if layer.contains("_branch") {
                    if layer.ends_with('x') {
                        TapPoint::Norm(stage)
                    } else {
                        TapPoint::Conv(stage)
                    }
                } else if layer.ends_with('x') {
                    TapPoint::Relu(stage)
                } else {
                    TapPoint::Residual(stage)
                }
            }
        },
        Family::Vgg16 | Family::Vgg19 | Family::Alexnet => {
            let group = |prefix: &str| digit_after(layer, prefix).map(|g| g.saturating_sub(1).min(4));
            if let Some(n) = digit_after(layer, "fc") {
                return TapPoint::Dense(n.saturating_sub(5).clamp(1, 3));
            }
            match layer {
                "relu6" => return TapPoint::DenseRelu(1),
                "relu7" => return TapPoint::DenseRelu(2),
                "prob" => return TapPoint::Dense(3),
                _ => {}
            }
            if let Some(g) = group("conv") {
                TapPoint::Conv(g)
            } else if let Some(g) = group("relu") {
                TapPoint::Relu(g)
            } else if let Some(g) = group("norm") {
                TapPoint::Norm(g)
            } else if let Some(g) = group("pool") {
                if g >= 4 {
                    TapPoint::GlobalPool
                } else {
                    TapPoint::Pool(g)
                }
            } else {
                TapPoint::GlobalPool
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet152_candidates_are_the_nine_studied_layers() {
        let rows = list_candidate_layers(Family::Resnet152);
        let names: Vec<_> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "res4b35_branch2c", "res4b35_branch2cx", "res4b35", "res4b35x", "res5c_branch2c",
                "res5c_branch2cx", "res5c", "res5cx", "pool5"
            ]
        );
        let last = rows.last().unwrap();
        assert_eq!((last.stage.as_str(), last.operation.as_str()), ("Final", "Average Pooling"));
        let published = published_layers(Family::Resnet152);
        assert!(rows.iter().all(|r| published.contains(&r.name)));
    }

    #[test]
    fn published_lists_contain_default_taps() {
        for family in Family::ALL {
            let layers = published_layers(family);
            assert!(layers.contains(&family.default_tap().to_string()), "{family}");
            for c in list_candidate_layers(family) {
                assert!(layers.contains(&c.name), "{family}: {}", c.name);
            }
        }
        assert!(published_layers(Family::Resnet101).contains(&"res4b22".to_string()));
        assert!(!published_layers(Family::Resnet101).contains(&"res4b23".to_string()));
    }

    #[test]
    fn vgg19_lists_second_fully_connected_layer() {
        assert!(list_candidate_layers(Family::Vgg19).iter().any(|c| c.name == "fc7"));
    }

    #[test]
    fn candidate_lists_are_pure() {
        assert_eq!(list_candidate_layers(Family::Alexnet), list_candidate_layers(Family::Alexnet));
    }

    #[test]
    fn tap_points_follow_stage_and_operation() {
        use TapPoint::*;
        let f = Family::Resnet152;
        assert_eq!(tap_point(f, "res4b35_branch2c"), Conv(3));
        assert_eq!(tap_point(f, "res4b35_branch2cx"), Norm(3));
        assert_eq!(tap_point(f, "res4b35"), Residual(3));
        assert_eq!(tap_point(f, "res4b35x"), Relu(3));
        assert_eq!(tap_point(f, "res5c"), Residual(4));
        assert_eq!(tap_point(f, "pool5"), GlobalPool);
        assert_eq!(tap_point(Family::Vgg19, "fc7"), Dense(2));
        assert_eq!(tap_point(Family::Vgg19, "relu7"), DenseRelu(2));
        assert_eq!(tap_point(Family::Alexnet, "conv5"), Conv(4));
        assert_eq!(tap_point(Family::Alexnet, "pool5"), GlobalPool);
    }
}
