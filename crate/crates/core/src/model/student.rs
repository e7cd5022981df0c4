use super::AcousticModel;
use crate::error::{Error, Result};

/// Which teacher transformer layers a student keeps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelection {
    /// `keep` layers spread evenly over the teacher: indices `⌊j·D/keep⌋`.
    Alternating { keep: usize },
    /// The last `keep` layers.
    LastK { keep: usize },
    Explicit(Vec<usize>),
}

impl LayerSelection {
    /// Teacher layer indices for a teacher of `depth` layers.
    pub fn indices(&self, depth: usize) -> Result<Vec<usize>> {
        let check_keep = |keep: usize| {
            if keep == 0 || keep > depth {
                Err(Error::Selection(format!(
                    "cannot keep {keep} of {depth} teacher layers"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSelection::Alternating { keep } => {
                check_keep(*keep)?;
                Ok((0..*keep).map(|j| j * depth / keep).collect())
            }
            LayerSelection::LastK { keep } => {
                check_keep(*keep)?;
                Ok((depth - keep..depth).collect())
            }
            LayerSelection::Explicit(idx) => {
                if idx.is_empty() {
                    return Err(Error::Selection("empty layer list".into()));
                }
                if idx.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Selection(format!(
                        "indices {idx:?} are not strictly increasing"
                    )));
                }
                if idx.iter().any(|&i| i >= depth) {
                    return Err(Error::Selection(format!(
                        "indices {idx:?} exceed teacher depth {depth}"
                    )));
                }
                Ok(idx.clone())
            }
        }
    }
}

/// Builds a student whose transformer layer `i` is a copy of teacher layer
/// `sel[i]`. The conv encoder, positional table and token head are copied
/// from the teacher as well; everything stays trainable.
pub fn init_student(teacher: &AcousticModel, sel: &LayerSelection) -> Result<AcousticModel> {
    let idx = sel.indices(teacher.layers.len())?;
    let config = teacher.config().with_layers(idx.len());
    let layers = idx.iter().map(|&i| teacher.layers[i].clone()).collect();
    AcousticModel::from_parts(
        config,
        teacher.convs.clone(),
        teacher.positions.clone(),
        layers,
        teacher.head.clone(),
    )
}
