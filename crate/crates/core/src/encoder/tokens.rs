//! The token matrix passed between pipeline stages.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::scenario::Pose2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Agent,
    Map,
}

impl TokenKind {
    pub fn index(self) -> usize {
        match self {
            TokenKind::Agent => 0,
            TokenKind::Map => 1,
        }
    }
}

/// `(N_a+N_m) × D` features stored compactly: only valid rows live on the
/// tape, in token order. Invalid rows are zero by construction.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub compact: Var,
    /// Token position of each compact row, strictly increasing.
    pub index: Vec<usize>,
    pub valid: Vec<bool>,
    pub kinds: Vec<TokenKind>,
    pub anchors: Vec<[f64; 2]>,
    pub reference: Pose2D,
}

impl TokenSet {
    pub fn new(
        compact: Var,
        valid: Vec<bool>,
        kinds: Vec<TokenKind>,
        anchors: Vec<[f64; 2]>,
        reference: Pose2D,
    ) -> Result<Self> {
        let index: Vec<usize> = valid.iter().enumerate().filter_map(|(i, &v)| v.then_some(i)).collect();
        if index.len() != compact.rows() || kinds.len() != valid.len() || anchors.len() != valid.len() {
            return Err(Error::Dimension {
                op: "token set",
                lhs: vec![compact.rows(), valid.len()],
                rhs: vec![index.len(), kinds.len(), anchors.len()],
            });
        }
        if kinds.windows(2).any(|w| w[0] == TokenKind::Map && w[1] == TokenKind::Agent) {
            return Err(Error::Input("agent tokens must precede map tokens".into()));
        }
        Ok(TokenSet {
            compact,
            index,
            valid,
            kinds,
            anchors,
            reference,
        })
    }

    /// Takes the valid rows of a dense `N × D` matrix.
    pub fn from_dense(
        tape: &mut Tape,
        dense: Var,
        valid: Vec<bool>,
        kinds: Vec<TokenKind>,
        anchors: Vec<[f64; 2]>,
        reference: Pose2D,
    ) -> Result<Self> {
        if dense.rows() != valid.len() {
            return Err(Error::Mask(format!(
                "mask length {} does not match {} tokens",
                valid.len(),
                dense.rows()
            )));
        }
        let idx: Vec<usize> = valid.iter().enumerate().filter_map(|(i, &v)| v.then_some(i)).collect();
        let compact = tape.gather_rows(dense, &idx)?;
        TokenSet::new(compact, valid, kinds, anchors, reference)
    }

    /// Same mask and metadata, new compact features.
    pub fn with_compact(&self, compact: Var) -> Result<Self> {
        if compact.rows() != self.index.len() {
            return Err(Error::Dimension {
                op: "token set",
                lhs: compact.shape().to_vec(),
                rhs: vec![self.index.len(), compact.cols()],
            });
        }
        Ok(TokenSet {
            compact,
            ..self.clone()
        })
    }

    /// Materializes the dense `N × D` matrix.
    pub fn dense(&self, tape: &mut Tape) -> Result<Var> {
        tape.scatter_rows(self.compact, &self.index, self.valid.len())
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.index.len()
    }

    pub fn dim(&self) -> usize {
        self.compact.cols()
    }

    pub fn n_agents(&self) -> usize {
        self.kinds.iter().filter(|&&k| k == TokenKind::Agent).count()
    }

    /// Compact row holding `token`, if valid.
    pub fn compact_row(&self, token: usize) -> Option<usize> {
        self.index.binary_search(&token).ok()
    }

    /// Compact rows whose token has kind `kind`.
    pub fn rows_of(&self, kind: TokenKind) -> Vec<usize> {
        self.index
            .iter()
            .enumerate()
            .filter_map(|(r, &t)| (self.kinds[t] == kind).then_some(r))
            .collect()
    }
}
