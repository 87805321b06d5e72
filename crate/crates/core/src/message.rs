//! The message container that flows through the whole pipeline: a map of
//! string headers plus an opaque body, with a canonical JSON envelope used
//! as the directory-queue payload format.
//!
//! The envelope is deterministic — sorted keys, no insignificant whitespace —
//! so two serializations of equal messages are byte-identical on any
//! platform. Bodies that are not valid UTF-8 are carried base64-encoded with
//! an explicit `"encoding":"base64"` marker.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from message construction and the JSON envelope codec.
#[derive(Debug, Error)]
pub enum MessageError {
    #[error("header key {0:?} is empty or contains control characters")]
    InvalidHeaderKey(String),

    #[error("body is not valid UTF-8 but the message is marked as text")]
    NotText,

    #[error("malformed message envelope: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown body encoding {0:?}")]
    UnknownEncoding(String),

    #[error("body is not valid base64: {0}")]
    BadBase64(#[from] base64::DecodeError),
}

/// Header map plus body. Immutable once built; clone freely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    header: BTreeMap<String, String>,
    body: Vec<u8>,
    is_text: bool,
}

impl Message {
    /// Builds a text message. The body must be valid UTF-8 by construction.
    pub fn text(body: impl Into<String>) -> Self {
        Message { header: BTreeMap::new(), body: body.into().into_bytes(), is_text: true }
    }

    /// Builds a binary message.
    pub fn binary(body: impl Into<Vec<u8>>) -> Self {
        Message { header: BTreeMap::new(), body: body.into(), is_text: false }
    }

    /// Builds a message from raw parts, validating the header keys and the
    /// text flag against the body bytes.
    pub fn from_parts(
        header: BTreeMap<String, String>,
        body: Vec<u8>,
        is_text: bool,
    ) -> Result<Self, MessageError> {
        for key in header.keys() {
            validate_header_key(key)?;
        }
        if is_text && std::str::from_utf8(&body).is_err() {
            return Err(MessageError::NotText);
        }
        Ok(Message { header, body, is_text })
    }

    /// Adds a header, consuming and returning the message.
    pub fn with_header(
        mut self,
        key: impl Into<String>,
        value: impl Into<String>,
    ) -> Result<Self, MessageError> {
        let key = key.into();
        validate_header_key(&key)?;
        self.header.insert(key, value.into());
        Ok(self)
    }

    pub fn header(&self) -> &BTreeMap<String, String> {
        &self.header
    }

    /// First value for a header key, if present.
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    pub fn body(&self) -> &[u8] {
        &self.body
    }

    pub fn is_text(&self) -> bool {
        self.is_text
    }

    /// Serializes to the canonical JSON envelope.
    pub fn serialize(&self) -> Vec<u8> {
        let (body, encoding) = match std::str::from_utf8(&self.body) {
            Ok(text) => (text.to_string(), None),
            Err(_) => (BASE64.encode(&self.body), Some("base64".to_string())),
        };
        let envelope = Envelope { body, encoding, header: &self.header, text: self.is_text };
        // A struct of strings and booleans cannot fail to serialize.
        serde_json::to_vec(&envelope).expect("envelope serialization is infallible")
    }

    /// Parses the canonical JSON envelope. Key order and whitespace are
    /// accepted; unknown top-level keys are rejected so schema drift between
    /// producers and consumers sharing a queue surfaces immediately.
    pub fn deserialize(bytes: &[u8]) -> Result<Self, MessageError> {
        let envelope: OwnedEnvelope = serde_json::from_slice(bytes)?;
        let body = match envelope.encoding.as_deref() {
            None => envelope.body.into_bytes(),
            Some("base64") => BASE64.decode(envelope.body.as_bytes())?,
            Some(other) => return Err(MessageError::UnknownEncoding(other.to_string())),
        };
        Message::from_parts(envelope.header, body, envelope.text)
    }
}

fn validate_header_key(key: &str) -> Result<(), MessageError> {
    if key.is_empty() || key.chars().any(char::is_control) {
        return Err(MessageError::InvalidHeaderKey(key.to_string()));
    }
    Ok(())
}

/// Field order fixes the canonical key order of the envelope.
#[derive(Serialize)]
struct Envelope<'a> {
    body: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoding: Option<String>,
    header: &'a BTreeMap<String, String>,
    text: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OwnedEnvelope {
    body: String,
    #[serde(default)]
    encoding: Option<String>,
    header: BTreeMap<String, String>,
    text: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_message_serializes_canonically() {
        let m = Message::text("");
        assert_eq!(m.serialize(), br#"{"body":"","header":{},"text":true}"#);
    }

    #[test]
    fn text_message_with_header_matches_frozen_envelope() {
        let m = Message::text("hostName: wn01\n")
            .with_header("destination", "/queue/grid.probe")
            .unwrap();
        // Cross-checked against an independent JSON writer.
        let expected =
            r#"{"body":"hostName: wn01\n","header":{"destination":"/queue/grid.probe"},"text":true}"#;
        assert_eq!(String::from_utf8(m.serialize()).unwrap(), expected);
    }

    #[test]
    fn non_utf8_body_is_base64_marked() {
        let m = Message::binary(vec![0x00, 0xFF]);
        // Independent oracle: 00000000 11111111 -> 000000 001111 1111(00)
        // -> indices 0, 15, 60 -> "A", "P", "8", one pad char.
        assert_eq!(
            m.serialize(),
            br#"{"body":"AP8=","encoding":"base64","header":{},"text":false}"#
        );
    }

    #[test]
    fn deserialize_inverts_the_three_envelopes() {
        for m in [
            Message::text(""),
            Message::text("hostName: wn01\n")
                .with_header("destination", "/queue/grid.probe")
                .unwrap(),
            Message::binary(vec![0x00, 0xFF]),
        ] {
            assert_eq!(Message::deserialize(&m.serialize()).unwrap(), m);
        }
    }

    #[test]
    fn deserialize_accepts_any_key_order_and_whitespace() {
        let m = Message::deserialize(
            b" { \"text\" : true , \"header\" : { } , \"body\" : \"hi\" } ",
        )
        .unwrap();
        assert_eq!(m.body(), b"hi");
        assert!(m.is_text());
    }

    #[test]
    fn deserialize_rejects_wrong_types_unknown_keys_and_encodings() {
        assert!(matches!(
            Message::deserialize(br#"{"body":1,"header":{},"text":true}"#),
            Err(MessageError::Json(_))
        ));
        assert!(matches!(
            Message::deserialize(br#"{"foo":1,"body":"","header":{},"text":true}"#),
            Err(MessageError::Json(_))
        ));
        assert!(matches!(
            Message::deserialize(br#"{"body":"","header":{"k":3},"text":true}"#),
            Err(MessageError::Json(_))
        ));
        assert!(matches!(
            Message::deserialize(br#"{"body":"","encoding":"hex","header":{},"text":false}"#),
            Err(MessageError::UnknownEncoding(_))
        ));
    }

    #[test]
    fn text_flag_must_match_body() {
        assert!(matches!(
            Message::from_parts(BTreeMap::new(), vec![0xFF], true),
            Err(MessageError::NotText)
        ));
    }

    #[test]
    fn header_keys_are_validated() {
        assert!(Message::text("x").with_header("", "v").is_err());
        assert!(Message::text("x").with_header("a\nb", "v").is_err());
        assert!(Message::text("x").with_header("plain-key", "v").is_ok());
    }

    fn arb_header() -> impl Strategy<Value = BTreeMap<String, String>> {
        proptest::collection::btree_map("[a-zA-Z0-9_.-]{1,12}", ".{0,24}", 0..4)
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            header in arb_header(),
            body in proptest::collection::vec(any::<u8>(), 0..256),
        ) {
            let is_text = std::str::from_utf8(&body).is_ok();
            let m = Message::from_parts(header, body, is_text).unwrap();
            let bytes = m.serialize();
            prop_assert_eq!(Message::deserialize(&bytes).unwrap(), m);
            // Determinism: repeated serialization is byte-identical.
            prop_assert_eq!(bytes.clone(), {
                let again = Message::deserialize(&bytes).unwrap();
                again.serialize()
            });
        }
    }
}
