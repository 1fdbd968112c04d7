//! Group PKI model.
//!
//! Certificates bind a user and group to exactly one node ID. Signatures and
//! cookies are keyed SHA-256 tokens; they stand in for real asymmetric
//! crypto and only need to be unforgeable without the key inside the
//! simulation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ring::NodeId;
use crate::sim::Time;

/// Serialized size of a revocation notice on the wire.
pub const REVOCATION_NOTICE_BYTES: u64 = 300;

/// Default cookie epoch.
pub const COOKIE_EPOCH_MS: Time = 60_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token([u8; 16]);

impl Token {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Token(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

fn keyed_token(key: &[u8], domain: &str, parts: &[&[u8]]) -> Token {
    let mut h = Sha256::new();
    h.update((key.len() as u64).to_le_bytes());
    h.update(key);
    h.update(domain.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let full = h.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    Token(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub node_id: NodeId,
    pub user: String,
    pub group: String,
    pub serial: u64,
    pub issued_at: Time,
    pub signature: Token,
}

impl Certificate {
    fn signed_fields(&self) -> [Vec<u8>; 5] {
        [
            self.node_id.0.to_be_bytes().to_vec(),
            self.user.as_bytes().to_vec(),
            self.group.as_bytes().to_vec(),
            self.serial.to_be_bytes().to_vec(),
            self.issued_at.to_be_bytes().to_vec(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RevocationNotice {
    pub user: String,
    pub group: String,
    pub revoked_at: Time,
    pub signature: Token,
}

impl RevocationNotice {
    pub fn serialized_size(&self) -> u64 {
        REVOCATION_NOTICE_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigningPolicy {
    AutoSign,
    ManualApprove,
    /// Auto-sign up to `limit` requests per user, then wait for approval.
    QuotaThenManual(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertRequest {
    pub id: u64,
    pub user: String,
    pub group: String,
    pub node_id: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Enrollment {
    Issued(Certificate),
    Pending(u64),
}

/// Verification half of a CA, handed to overlay nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaVerifier {
    group: String,
    key: [u8; 32],
}

impl CaVerifier {
    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn signature_valid(&self, cert: &Certificate) -> bool {
        let f = cert.signed_fields();
        cert.group == self.group
            && keyed_token(&self.key, "cert", &[&f[0], &f[1], &f[2], &f[3], &f[4]]) == cert.signature
    }

    pub fn notice_valid(&self, n: &RevocationNotice) -> bool {
        n.group == self.group
            && keyed_token(
                &self.key,
                "revoke",
                &[n.user.as_bytes(), n.group.as_bytes(), &n.revoked_at.to_be_bytes()],
            ) == n.signature
    }
}

/// What a node currently believes has been revoked.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RevocationView {
    pub users: BTreeSet<String>,
    pub serials: BTreeSet<u64>,
}

impl RevocationView {
    pub fn apply(&mut self, notice: &RevocationNotice) {
        self.users.insert(notice.user.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    BadSignature,
    IdMismatch,
    RevokedUser,
    RevokedSerial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Accepts a peer iff its certificate is signed by this group's CA, names
/// the presenting node, and is not revoked in the local view.
pub fn verify_peer(cert: &Certificate, ca: &CaVerifier, presented: NodeId, view: &RevocationView) -> Verdict {
    if !ca.signature_valid(cert) {
        Verdict::Reject(RejectReason::BadSignature)
    } else if cert.node_id != presented {
        Verdict::Reject(RejectReason::IdMismatch)
    } else if view.users.contains(&cert.user) {
        Verdict::Reject(RejectReason::RevokedUser)
    } else if view.serials.contains(&cert.serial) {
        Verdict::Reject(RejectReason::RevokedSerial)
    } else {
        Verdict::Accept
    }
}

#[derive(Debug, Clone)]
pub struct GroupCA {
    group: String,
    key: [u8; 32],
    policy: SigningPolicy,
    members: BTreeMap<String, String>,
    revoked_users: BTreeMap<String, Time>,
    revoked_serials: BTreeSet<u64>,
    issued: BTreeMap<u64, Certificate>,
    pending: BTreeMap<u64, CertRequest>,
    auto_signed: BTreeMap<String, u32>,
    next_serial: u64,
    next_request: u64,
}

impl GroupCA {
    pub fn new(group: &str, seed: u64, policy: SigningPolicy) -> Self {
        let digest = Sha256::digest([group.as_bytes(), &seed.to_le_bytes()].concat());
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Self {
            group: group.to_string(),
            key,
            policy,
            members: BTreeMap::new(),
            revoked_users: BTreeMap::new(),
            revoked_serials: BTreeSet::new(),
            issued: BTreeMap::new(),
            pending: BTreeMap::new(),
            auto_signed: BTreeMap::new(),
            next_serial: 1,
            next_request: 1,
        }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn verifier(&self) -> CaVerifier {
        CaVerifier { group: self.group.clone(), key: self.key }
    }

    pub fn add_member(&mut self, user: &str, shared_secret: &str) {
        self.members.insert(user.to_string(), shared_secret.to_string());
    }

    pub fn is_revoked(&self, user: &str) -> bool {
        self.revoked_users.contains_key(user)
    }

    pub fn pending(&self) -> impl Iterator<Item = &CertRequest> {
        self.pending.values()
    }

    pub fn issued(&self) -> impl Iterator<Item = &Certificate> {
        self.issued.values()
    }

    /// Submits a certificate request for `node_id` on behalf of `user`.
    pub fn enroll(&mut self, user: &str, shared_secret: &str, node_id: NodeId, now: Time) -> Result<Enrollment> {
        match self.members.get(user) {
            None => return Err(Error::UnknownUser(user.to_string())),
            Some(s) if s != shared_secret => return Err(Error::BadSecret(user.to_string())),
            Some(_) => {}
        }
        if self.is_revoked(user) {
            return Err(Error::RevokedUser(user.to_string()));
        }
        let req = CertRequest {
            id: self.next_request,
            user: user.to_string(),
            group: self.group.clone(),
            node_id,
        };
        self.next_request += 1;
        let auto = match self.policy {
            SigningPolicy::AutoSign => true,
            SigningPolicy::ManualApprove => false,
            SigningPolicy::QuotaThenManual(limit) => self.auto_signed.get(user).copied().unwrap_or(0) < limit,
        };
        if auto {
            *self.auto_signed.entry(user.to_string()).or_default() += 1;
            Ok(Enrollment::Issued(self.sign_request(&req, now)))
        } else {
            let id = req.id;
            self.pending.insert(id, req);
            Ok(Enrollment::Pending(id))
        }
    }

    /// Administrative approval of a queued request.
    pub fn approve(&mut self, request_id: u64, now: Time) -> Result<Certificate> {
        let req = self.pending.remove(&request_id).ok_or(Error::UnknownRequest(request_id))?;
        if self.is_revoked(&req.user) {
            return Err(Error::RevokedUser(req.user));
        }
        Ok(self.sign_request(&req, now))
    }

    pub fn sign_request(&mut self, req: &CertRequest, now: Time) -> Certificate {
        let mut cert = Certificate {
            node_id: req.node_id,
            user: req.user.clone(),
            group: self.group.clone(),
            serial: self.next_serial,
            issued_at: now,
            signature: Token([0; 16]),
        };
        self.next_serial += 1;
        let f = cert.signed_fields();
        cert.signature = keyed_token(&self.key, "cert", &[&f[0], &f[1], &f[2], &f[3], &f[4]]);
        self.issued.insert(cert.serial, cert.clone());
        cert
    }

    /// Revokes every certificate bearing `user`.
    pub fn revoke_user(&mut self, user: &str, now: Time) -> Result<RevocationNotice> {
        if !self.members.contains_key(user) {
            return Err(Error::UnknownUser(user.to_string()));
        }
        self.revoked_users.entry(user.to_string()).or_insert(now);
        let signature = keyed_token(
            &self.key,
            "revoke",
            &[user.as_bytes(), self.group.as_bytes(), &now.to_be_bytes()],
        );
        Ok(RevocationNotice {
            user: user.to_string(),
            group: self.group.clone(),
            revoked_at: now,
            signature,
        })
    }

    /// Adds a single certificate to the CRL.
    pub fn revoke_serial(&mut self, serial: u64) -> Result<()> {
        if !self.issued.contains_key(&serial) {
            return Err(Error::UnknownSerial(serial));
        }
        self.revoked_serials.insert(serial);
        Ok(())
    }

    /// The CA's own authoritative view.
    pub fn revocation_view(&self) -> RevocationView {
        RevocationView {
            users: self.revoked_users.keys().cloned().collect(),
            serials: self.revoked_serials.clone(),
        }
    }

    /// One `user,group,revoked_at` record per line.
    pub fn export_revocation_list(&self) -> String {
        self.revoked_users
            .iter()
            .map(|(u, t)| format!("{u},{},{t}\n", self.group))
            .collect()
    }
}

/// Stateless anti-spoofing cookie for `identity` in the epoch containing
/// `now`.
pub fn cookie(responder_secret: &[u8], identity: &[u8], now: Time, epoch_ms: Time) -> Token {
    let epoch = now / epoch_ms.max(1);
    keyed_token(responder_secret, "cookie", &[identity, &epoch.to_be_bytes()])
}

/// Handshake responder that allocates session state only after a valid
/// cookie echo.
#[derive(Debug, Clone)]
pub struct CookieResponder {
    secret: Vec<u8>,
    epoch_ms: Time,
    sessions: BTreeSet<Vec<u8>>,
}

impl CookieResponder {
    pub fn new(secret: &[u8], epoch_ms: Time) -> Self {
        Self { secret: secret.to_vec(), epoch_ms, sessions: BTreeSet::new() }
    }

    /// Answers an initial hello with a cookie and keeps nothing.
    pub fn on_hello(&self, identity: &[u8], now: Time) -> Token {
        cookie(&self.secret, identity, now, self.epoch_ms)
    }

    /// Accepts the echo if it matches this or the previous epoch.
    pub fn on_echo(&mut self, identity: &[u8], echoed: Token, now: Time) -> bool {
        let current = cookie(&self.secret, identity, now, self.epoch_ms);
        let previous = cookie(&self.secret, identity, now.saturating_sub(self.epoch_ms), self.epoch_ms);
        if echoed == current || echoed == previous {
            self.sessions.insert(identity.to_vec());
            true
        } else {
            false
        }
    }

    pub fn allocated_sessions(&self) -> usize {
        self.sessions.len()
    }
}
