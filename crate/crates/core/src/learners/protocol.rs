//! Wire types of the JSON-lines worker protocol.
//!
//! Each request is one JSON object on one line, tagged by `cmd`. Every request gets
//! exactly one response line. Paths are resolved against the worker's working
//! directory when relative; outputs must resolve inside it.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{BuiltinConfig, TrainReport};

pub const PROTOCOL_VERSION: u32 = 1;

pub const COMMANDS: [&str; 5] = ["train_seg", "train_cost", "predict_probs", "predict_committee", "predict_cost"];

/// Supervision for one image. `labels` holds class indices with `-1` for unlabeled;
/// `mask` (0/1) defaults to "every labeled pixel".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegInput {
    pub image_id: String,
    pub features: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInput {
    pub image_id: String,
    pub features: PathBuf,
    pub clicks: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Request {
    TrainSeg {
        num_classes: usize,
        train: Vec<SegInput>,
        #[serde(default)]
        val: Vec<SegInput>,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<BuiltinConfig>,
    },
    TrainCost {
        train: Vec<CostInput>,
        #[serde(default)]
        val: Vec<CostInput>,
        seed: u64,
    },
    PredictProbs {
        image_id: String,
        features: PathBuf,
        out: PathBuf,
    },
    /// Member `k` is written to `<out_prefix>_<k>.dmt`.
    PredictCommittee {
        image_id: String,
        features: PathBuf,
        members: usize,
        seed: u64,
        out_prefix: PathBuf,
    },
    PredictCost {
        image_id: String,
        features: PathBuf,
        out: PathBuf,
    },
}

/// A request with an optional correlation id echoed in the response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(flatten)]
    pub request: Request,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownCmd,
    BadJson,
    BadRequest,
    Untrained,
    Io,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<ErrorCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// The offending input line for `bad_json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<PathBuf>>,
}

impl Response {
    pub fn ok(id: Option<u64>) -> Self {
        Response {
            status: Status::Ok,
            id,
            code: None,
            message: None,
            line: None,
            report: None,
            output: None,
            outputs: None,
        }
    }

    pub fn error(id: Option<u64>, code: ErrorCode, message: impl Into<String>) -> Self {
        Response {
            status: Status::Error,
            code: Some(code),
            message: Some(message.into()),
            ..Response::ok(id)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_flattens_command_tag() {
        let line = r#"{"id":3,"cmd":"predict_probs","image_id":"a","features":"f.dmt","out":"o.dmt"}"#;
        let env: Envelope = serde_json::from_str(line).unwrap();
        assert_eq!(env.id, Some(3));
        assert!(matches!(env.request, Request::PredictProbs { .. }));
        let back = serde_json::to_string(&env).unwrap();
        assert_eq!(serde_json::from_str::<Envelope>(&back).unwrap(), env);
    }

    #[test]
    fn error_response_shape() {
        let r = Response::error(None, ErrorCode::UnknownCmd, "no such command: fly");
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"status":"error","code":"unknown_cmd","message":"no such command: fly"}"#
        );
    }
}
