use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{ChatMessage, Decoding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Chat,
    Score,
    Embed,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Capability::Chat => "chat",
            Capability::Score => "score",
            Capability::Embed => "embed",
        })
    }
}

/// Stable address of a request: SHA-256 over the capability, the messages
/// with whitespace runs collapsed, and the decoding parameters. Sixteen hex
/// digits.
pub fn fingerprint(capability: Capability, messages: &[ChatMessage], decoding: Option<&Decoding>) -> String {
    let normalized: Vec<_> = messages
        .iter()
        .map(|m| {
            json!({
                "role": m.role,
                "content": m.content.split_whitespace().collect::<Vec<_>>().join(" "),
            })
        })
        .collect();
    let doc = json!({
        "capability": capability,
        "messages": normalized,
        "decoding": decoding,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(&digest[..8])
}
