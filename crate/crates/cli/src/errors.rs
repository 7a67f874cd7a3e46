use slimdet::data::DataError;
use slimdet::model::ModelError;
use slimdet::netcfg::{CfgError, WeightError};
use slimdet::train::TrainError;

pub const PARSE: u8 = 2;
pub const WEIGHT_MISMATCH: u8 = 3;
pub const IO: u8 = 4;

/// Bad flag values that clap cannot check on its own.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn weight_code(e: &WeightError) -> u8 {
    match e {
        WeightError::Graph(_) => PARSE,
        _ => WEIGHT_MISMATCH,
    }
}

/// Maps the first recognised error in the chain to an exit status.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<CfgError>() {
            return PARSE;
        }
        if let Some(e) = cause.downcast_ref::<WeightError>() {
            return weight_code(e);
        }
        if let Some(ModelError::Weights(e)) = cause.downcast_ref::<ModelError>() {
            return weight_code(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::InvalidConfig(_) => return PARSE,
                TrainError::Model(ModelError::Weights(w)) => return weight_code(w),
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return match e {
                DataError::MalformedLine { .. } | DataError::BoxOutOfRange { .. } => PARSE,
                DataError::MissingLabel(_) | DataError::Io { .. } | DataError::Image { .. } => IO,
            };
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
    }
    1
}
