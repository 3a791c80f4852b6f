use serde::{Deserialize, Serialize};

use super::unet::{is_head_key, UNet};
use super::WeightSnapshot;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPolicy {
    /// Copy the body; keep the destination head as initialized.
    BodyOnly,
    /// Copy the body and every head channel with a counterpart in the
    /// source: the whole head for identical heads, otherwise only the
    /// intensity-regression channel.
    BodyAndCompatibleHead,
}

/// Copies weights from `src` into `dst`. Fails on the first body tensor whose
/// name or shape differs.
pub fn transfer_weights(src: &WeightSnapshot, dst: &mut UNet, policy: TransferPolicy) -> Result<()> {
    let src_head = src.meta.spec.head;
    let dst_head = dst.head_kind();
    let mut dst_body = 0;
    for (name, mut slot) in dst.slots() {
        if is_head_key(&name) {
            continue;
        }
        dst_body += 1;
        let stored = src.tensors.get(&name).ok_or_else(|| Error::IncompatibleWeights {
            layer: name.clone(),
            msg: "missing from source".into(),
        })?;
        if stored.shape != slot.shape() {
            return Err(Error::IncompatibleWeights {
                layer: name.clone(),
                msg: format!("shape {:?} vs {:?}", stored.shape, slot.shape()),
            });
        }
        slot.value_mut().copy_from_slice(&stored.data);
    }
    if let Some((name, _)) = src.body().nth(dst_body) {
        return Err(Error::IncompatibleWeights {
            layer: name.clone(),
            msg: "source body has extra layers".into(),
        });
    }
    if policy == TransferPolicy::BodyOnly {
        return Ok(());
    }
    let get = |key: &str| {
        src.tensors.get(key).ok_or_else(|| Error::IncompatibleWeights {
            layer: key.into(),
            msg: "missing from source".into(),
        })
    };
    let (w_src, b_src) = (get("head.weight")?, get("head.bias")?);
    let channel_map: Vec<(usize, usize)> = if src_head == dst_head {
        (0..dst_head.channels()).map(|c| (c, c)).collect()
    } else {
        match (src_head.regression_channel(), dst_head.regression_channel()) {
            (Some(s), Some(d)) => vec![(s, d)],
            _ => Vec::new(),
        }
    };
    for (name, mut slot) in dst.slots() {
        let cin = match name.as_str() {
            "head.weight" => slot.shape()[1],
            "head.bias" => 1,
            _ => continue,
        };
        let stored = if name == "head.weight" { w_src } else { b_src };
        let src_cin = if name == "head.weight" { stored.shape[1] } else { 1 };
        if src_cin != cin {
            return Err(Error::IncompatibleWeights {
                layer: name,
                msg: "head input width differs".into(),
            });
        }
        let values = slot.value_mut();
        for &(s, d) in &channel_map {
            values[d * cin..(d + 1) * cin].copy_from_slice(&stored.data[s * cin..(s + 1) * cin]);
        }
    }
    Ok(())
}
