use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::{Error, Result, TokenId};

/// One fact to inject: `prompt` contains `subject` and should continue with
/// `target`. `preservation_prompt` also contains the subject and anchors the
/// drift penalty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub subject: Vec<TokenId>,
    pub fact_prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub preservation_prompt: Vec<TokenId>,
    pub edit_layer: usize,
}

impl EditRequest {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::Input("target is empty".into()));
        }
        if self.subject.is_empty() {
            return Err(Error::Input("subject is empty".into()));
        }
        if self.subject_end(&self.fact_prompt).is_none() {
            return Err(Error::Input("subject does not occur in the fact prompt".into()));
        }
        if self.subject_end(&self.preservation_prompt).is_none() {
            return Err(Error::Input("subject does not occur in the preservation prompt".into()));
        }
        config.check_layer(self.edit_layer)
    }

    /// End (exclusive) of the first occurrence of the subject in `prompt`.
    pub fn subject_end(&self, prompt: &[TokenId]) -> Option<usize> {
        let n = self.subject.len();
        if n == 0 || n > prompt.len() {
            return None;
        }
        prompt.windows(n).position(|w| w == self.subject.as_slice()).map(|i| i + n)
    }
}

/// Loss terms recorded after an optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::tiny_config;

    fn req() -> EditRequest {
        EditRequest {
            subject: vec![4, 5],
            fact_prompt: vec![1, 4, 5, 6],
            target: vec![7],
            preservation_prompt: vec![4, 5],
            edit_layer: 0,
        }
    }

    #[test]
    fn subject_span() {
        let r = req();
        assert_eq!(r.subject_end(&r.fact_prompt), Some(3));
        assert_eq!(r.subject_end(&[4, 6, 5]), None);
        assert!(r.validate(&tiny_config()).is_ok());
    }

    #[test]
    fn invalid_requests() {
        let cfg = tiny_config();
        let mut r = req();
        r.target.clear();
        assert!(matches!(r.validate(&cfg), Err(Error::Input(_))));
        let mut r = req();
        r.fact_prompt = vec![1, 2, 3];
        assert!(r.validate(&cfg).is_err());
        let mut r = req();
        r.edit_layer = 5;
        assert!(matches!(r.validate(&cfg), Err(Error::Config(_))));
    }
}
