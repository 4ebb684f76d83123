//! The closed set of process exit codes.

use gridbox_core::proto::ErrorCode;
use gridbox_core::Error;

/// Success.
pub const OK: u8 = 0;
/// The request was wrong: bad query, unknown algorithm, missing consent,
/// unknown name, rejected credentials, bad flags.
pub const USER: u8 = 1;
/// The environment failed: unreachable node, IO error, protocol failure,
/// internal error on the serving side.
pub const ENVIRONMENT: u8 = 2;
/// The command completed but the answer is degraded: some node did not
/// answer, or some job input failed.
pub const DEGRADED: u8 = 3;

/// Exit code for a core error.
pub fn for_error(e: &Error) -> u8 {
    if e.is_connectivity() {
        return ENVIRONMENT;
    }
    match e {
        Error::Io(_) | Error::Codec(_) | Error::Internal(_) | Error::Integrity(_) | Error::EmptyFederation => {
            ENVIRONMENT
        }
        Error::Remote(reply) => match reply.code {
            ErrorCode::Internal | ErrorCode::Oversize => ENVIRONMENT,
            _ => USER,
        },
        _ => USER,
    }
}

/// Exit code for a failed command: the first core or IO error in the
/// chain decides; anything else is a usage error.
pub fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return for_error(e);
        }
        if cause.is::<std::io::Error>() {
            return ENVIRONMENT;
        }
    }
    USER
}
