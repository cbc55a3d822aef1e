//! Token-level camera conditioning and attention-level bias injection.

pub mod attention;
pub mod bias;
pub mod camera;
pub mod mlp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use attention::{attention_backward, attention_forward, biased_attention, MultiHeadAttention};
pub use bias::{
    bias_table_gradient, bucket_bias, mlp_bias, BiasMatrix, BiasTable, BucketIndex, BUCKET_EPS, DEFAULT_BUCKETS,
};
pub use camera::{condition_additive, condition_cross_attention, condition_film, CameraToken};
pub use mlp::{Activation, Mlp2};

/// How the camera token is conditioned on image content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenConditioning {
    #[default]
    None,
    Additive,
    Film,
    CrossAttn,
}

/// Which additive bias, if any, enters the within-frame attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionBias {
    #[default]
    None,
    Bucket,
    MlpBias,
    LogAffinity,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::InvalidArgument(format!(concat!("unknown ", stringify!($ty), " {:?}"), other))),
                }
            }
        }
    };
}

str_enum!(TokenConditioning { None => "none", Additive => "additive", Film => "film", CrossAttn => "cross_attn" });
str_enum!(AttentionBias { None => "none", Bucket => "bucket", MlpBias => "mlp_bias", LogAffinity => "log_affinity" });
