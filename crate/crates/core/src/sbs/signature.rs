//! Signature schemes for SbS.
//!
//! A process only ever holds a [`Signer`] for its own identifier; verification
//! is open to everyone through [`Verifier`].

use std::fmt;
use std::sync::Arc;

use bytes::Bytes;
use ed25519_dalek::{Signature as EdSignature, Signer as _, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::NodeId;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(#[serde(with = "crate::hexser")] pub Bytes);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = hex::encode(&self.0);
        write!(f, "sig:{}", &hex[..hex.len().min(12)])
    }
}

pub trait SignatureScheme: Send + Sync {
    fn sign(&self, signer: NodeId, msg: &[u8]) -> Signature;
    fn verify(&self, signer: NodeId, msg: &[u8], sig: &Signature) -> bool;
}

/// Which scheme a run uses, plus the seed all keys derive from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum SchemeKind {
    /// Keyed hash known only to the harness. Unforgeable by construction since
    /// processes never see the key.
    Ideal { key_seed: u64 },
    Ed25519 { key_seed: u64 },
}

impl Default for SchemeKind {
    fn default() -> Self {
        SchemeKind::Ideal { key_seed: 0 }
    }
}

impl SchemeKind {
    pub fn build(self, processes: usize) -> Arc<dyn SignatureScheme> {
        match self {
            SchemeKind::Ideal { key_seed } => Arc::new(IdealScheme::new(key_seed)),
            SchemeKind::Ed25519 { key_seed } => Arc::new(Ed25519Scheme::new(key_seed, processes)),
        }
    }
}

pub struct IdealScheme {
    secret: [u8; 32],
}

impl IdealScheme {
    pub fn new(key_seed: u64) -> Self {
        let secret = Sha256::new()
            .chain_update(b"ideal-signature-secret")
            .chain_update(key_seed.to_be_bytes())
            .finalize()
            .into();
        IdealScheme { secret }
    }

    fn tag(&self, signer: NodeId, msg: &[u8]) -> [u8; 32] {
        Sha256::new()
            .chain_update(self.secret)
            .chain_update(signer.0.to_be_bytes())
            .chain_update(msg)
            .finalize()
            .into()
    }
}

impl SignatureScheme for IdealScheme {
    fn sign(&self, signer: NodeId, msg: &[u8]) -> Signature {
        Signature(Bytes::copy_from_slice(&self.tag(signer, msg)))
    }

    fn verify(&self, signer: NodeId, msg: &[u8], sig: &Signature) -> bool {
        sig.0.as_ref() == self.tag(signer, msg)
    }
}

/// Ed25519 with keys derived deterministically from a seed, one per process.
pub struct Ed25519Scheme {
    keys: Vec<SigningKey>,
    public: Vec<VerifyingKey>,
}

impl Ed25519Scheme {
    pub fn new(key_seed: u64, processes: usize) -> Self {
        let keys: Vec<SigningKey> = (0..processes as u64)
            .map(|id| {
                let seed: [u8; 32] = Sha256::new()
                    .chain_update(b"ed25519-key")
                    .chain_update(key_seed.to_be_bytes())
                    .chain_update(id.to_be_bytes())
                    .finalize()
                    .into();
                SigningKey::from_bytes(&seed)
            })
            .collect();
        let public = keys.iter().map(SigningKey::verifying_key).collect();
        Ed25519Scheme { keys, public }
    }
}

impl SignatureScheme for Ed25519Scheme {
    fn sign(&self, signer: NodeId, msg: &[u8]) -> Signature {
        let key = &self.keys[signer.0 as usize];
        Signature(Bytes::copy_from_slice(&key.sign(msg).to_bytes()))
    }

    fn verify(&self, signer: NodeId, msg: &[u8], sig: &Signature) -> bool {
        let Some(public) = self.public.get(signer.0 as usize) else {
            return false;
        };
        let Ok(sig) = EdSignature::from_slice(&sig.0) else {
            return false;
        };
        public.verify_strict(msg, &sig).is_ok()
    }
}

/// Signing capability bound to one identity.
#[derive(Clone)]
pub struct Signer {
    id: NodeId,
    scheme: Arc<dyn SignatureScheme>,
}

impl Signer {
    pub fn new(id: NodeId, scheme: Arc<dyn SignatureScheme>) -> Self {
        Signer { id, scheme }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        self.scheme.sign(self.id, msg)
    }

    pub fn verifier(&self) -> Verifier {
        Verifier {
            scheme: self.scheme.clone(),
        }
    }
}

#[derive(Clone)]
pub struct Verifier {
    scheme: Arc<dyn SignatureScheme>,
}

impl Verifier {
    pub fn new(scheme: Arc<dyn SignatureScheme>) -> Self {
        Verifier { scheme }
    }

    pub fn verify(&self, signer: NodeId, msg: &[u8], sig: &Signature) -> bool {
        self.scheme.verify(signer, msg, sig)
    }
}
