//! `DGPD` binary snapshot: magic, `u32` version, `u64` record count, then each record
//! prefixed by its `u32` byte length. All integers little-endian.

use crate::binio::{BinError, ByteReader, ByteWriter};

use super::{CharacterRecord, DictEntry, DictError, Dictionary, GlossEntry, Pronunciation};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"DGPD";
pub const SNAPSHOT_VERSION: u32 = 1;

fn encode_record(r: &CharacterRecord) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u32(r.character as u32);
    w.u32(r.entries.len() as u32);
    for e in &r.entries {
        w.u32(e.pron.phonemes.len() as u32);
        for p in &e.pron.phonemes {
            w.str(p);
        }
        w.u32(e.gloss.tokens.len() as u32);
        for &t in &e.gloss.tokens {
            w.u32(t as u32);
        }
    }
    w.into_bytes()
}

fn decode_record(bytes: &[u8]) -> Result<CharacterRecord, BinError> {
    let mut r = ByteReader::new(bytes);
    let character = r.char()?;
    let m = r.u32()? as usize;
    let mut entries = Vec::with_capacity(m.min(1024));
    for j in 0..m {
        let n = r.u32()? as usize;
        let mut phonemes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            phonemes.push(r.str()?);
        }
        let u = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(u.min(4096));
        for _ in 0..u {
            tokens.push(r.char()?);
        }
        entries.push(DictEntry {
            pron: Pronunciation::new(phonemes, j),
            gloss: GlossEntry { tokens },
        });
    }
    r.finish()?;
    Ok(CharacterRecord { character, entries })
}

pub fn encode_snapshot(dict: &Dictionary) -> Vec<u8> {
    let mut w = ByteWriter::with_header(SNAPSHOT_MAGIC, SNAPSHOT_VERSION);
    w.u64(dict.len() as u64);
    for rec in dict.records() {
        let payload = encode_record(rec);
        w.u32(payload.len() as u32);
        w.bytes(&payload);
    }
    w.into_bytes()
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Dictionary, DictError> {
    let mut r = ByteReader::with_header(bytes, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
    let n = r.count(4)?;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        records.push(decode_record(r.take(len)?)?);
    }
    r.finish()?;
    Dictionary::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_record() -> Dictionary {
        Dictionary::from_records(vec![CharacterRecord {
            character: '火',
            entries: vec![DictEntry {
                pron: Pronunciation::new(vec!["H".into(), "UO3".into()], 0),
                gloss: GlossEntry { tokens: vec!['燃', '烧'] },
            }],
        }])
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let d = one_record();
        assert_eq!(decode_snapshot(&encode_snapshot(&d)).unwrap(), d);
    }

    #[test]
    fn every_truncation_is_corrupt() {
        let bytes = encode_snapshot(&one_record());
        for cut in 0..bytes.len() {
            assert!(decode_snapshot(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_snapshot(&one_record());
        bytes[4] = 9;
        assert!(matches!(
            decode_snapshot(&bytes),
            Err(DictError::Snapshot(BinError::Version { found: 9, .. }))
        ));
    }
}
