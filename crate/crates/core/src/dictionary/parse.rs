use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{
    CharacterRecord, DictEntry, DictError, Dictionary, GlossEntry, Pronunciation, RecordError,
    DEFAULT_MAX_GLOSS_TOKENS, HEADER,
};

#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Gloss entries longer than this are truncated at the tail.
    pub max_gloss_tokens: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            max_gloss_tokens: DEFAULT_MAX_GLOSS_TOKENS,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPron {
    p: String,
    gloss: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    char: String,
    prons: Vec<RawPron>,
}

/// Outcome of a lenient parse: every data line is accounted for either as a record
/// or as a positioned error.
#[derive(Debug)]
pub struct ParseReport {
    pub dictionary: Dictionary,
    pub errors: Vec<(usize, RecordError)>,
    pub data_lines: usize,
}

fn tokenize_gloss(gloss: &str) -> Vec<char> {
    gloss.chars().filter(|c| !c.is_whitespace()).collect()
}

fn classify_json_error(e: serde_json::Error) -> RecordError {
    let msg = e.to_string();
    if msg.contains("escape") {
        RecordError::UnknownEscape(msg)
    } else {
        RecordError::Malformed(msg)
    }
}

fn parse_record(line: &str, opts: &ParseOptions) -> Result<CharacterRecord, RecordError> {
    if line.trim().is_empty() {
        return Err(RecordError::EmptyLine);
    }
    let raw: RawRecord = serde_json::from_str(line).map_err(classify_json_error)?;
    let mut chars = raw.char.chars();
    let character = match (chars.next(), chars.next()) {
        (Some(c), None) => c,
        _ => return Err(RecordError::NotSingleCharacter(raw.char)),
    };
    if raw.prons.is_empty() {
        return Err(RecordError::NoPronunciations);
    }

    // Senses that share a pronunciation collapse into one entry, in first-seen order.
    let mut entries: Vec<DictEntry> = Vec::new();
    let mut by_pron: HashMap<Vec<String>, usize> = HashMap::new();
    for (i, rp) in raw.prons.iter().enumerate() {
        let phonemes: Vec<String> = rp.p.split_whitespace().map(String::from).collect();
        if phonemes.is_empty() {
            return Err(RecordError::EmptyPhonemes(i));
        }
        let tokens = tokenize_gloss(&rp.gloss);
        match by_pron.get(&phonemes) {
            Some(&j) => entries[j].gloss.tokens.extend(tokens),
            None => {
                let j = entries.len();
                by_pron.insert(phonemes.clone(), j);
                entries.push(DictEntry {
                    pron: Pronunciation::new(phonemes, j),
                    gloss: GlossEntry { tokens },
                });
            }
        }
    }
    for (j, e) in entries.iter_mut().enumerate() {
        if e.gloss.tokens.is_empty() {
            return Err(RecordError::EmptyGloss(j));
        }
        e.gloss.tokens.truncate(opts.max_gloss_tokens.max(1));
    }
    Ok(CharacterRecord { character, entries })
}

fn parse_lines<R: BufRead>(
    reader: R,
    opts: &ParseOptions,
    mut on_error: impl FnMut(usize, RecordError) -> Result<(), DictError>,
) -> Result<(Vec<CharacterRecord>, usize), DictError> {
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        None => return Ok((Vec::new(), 0)),
        Some((_, header)) => {
            let header = header?;
            if header.trim_start_matches('\u{feff}').trim() != HEADER {
                return Err(DictError::MissingHeader(header));
            }
        }
    }
    let mut records = Vec::new();
    let mut first_line: HashMap<char, usize> = HashMap::new();
    let mut data_lines = 0;
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        data_lines += 1;
        match parse_record(&line, opts) {
            Ok(rec) => {
                if let Some(&first) = first_line.get(&rec.character) {
                    on_error(
                        line_no,
                        RecordError::DuplicateCharacter {
                            ch: rec.character,
                            first_line: first,
                        },
                    )?;
                } else {
                    first_line.insert(rec.character, line_no);
                    records.push(rec);
                }
            }
            Err(e) => on_error(line_no, e)?,
        }
    }
    Ok((records, data_lines))
}

/// Parses the text form, stopping at the first bad line.
pub fn parse_dictionary<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<Dictionary, DictError> {
    let (records, _) = parse_lines(reader, opts, |line, source| Err(DictError::Line { line, source }))?;
    Dictionary::from_records(records)
}

/// Parses the text form, collecting bad lines instead of failing on them.
pub fn parse_dictionary_lenient<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<ParseReport, DictError> {
    let mut errors = Vec::new();
    let (records, data_lines) = parse_lines(reader, opts, |line, e| {
        errors.push((line, e));
        Ok(())
    })?;
    Ok(ParseReport {
        dictionary: Dictionary::from_records(records)?,
        errors,
        data_lines,
    })
}

/// Writes the text form; `parse_dictionary` reads it back unchanged.
pub fn write_dictionary<W: Write>(dict: &Dictionary, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{HEADER}")?;
    for r in dict.records() {
        let raw = RawRecord {
            char: r.character.to_string(),
            prons: r
                .entries
                .iter()
                .map(|e| RawPron {
                    p: e.pron.text(),
                    gloss: e.gloss.tokens.iter().collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &raw)?;
        writeln!(out)?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dictionary, DictError> {
        parse_dictionary(s.as_bytes(), &ParseOptions::default())
    }

    const YUE: &str = r#"{"char":"乐","prons":[{"p":"L E4","gloss":"快乐，欢乐"},{"p":"Y UE4","gloss":"音乐"},{"p":"Y AO4","gloss":"喜爱"},{"p":"L AO4","gloss":"地名用字"}]}"#;

    #[test]
    fn four_pronunciations() {
        let d = parse(&format!("{HEADER}\n{YUE}\n")).unwrap();
        let r = d.lookup('乐').unwrap();
        assert_eq!(r.pron_count(), 4);
        assert!(r.is_polyphone());
        assert_eq!(r.entries[1].pron.phonemes, vec!["Y", "UE4"]);
        assert_eq!(r.entries[1].gloss.tokens, vec!['音', '乐']);
    }

    #[test]
    fn monophone_record() {
        let d = parse(&format!("{HEADER}\n{{\"char\":\"火\",\"prons\":[{{\"p\":\"H UO3\",\"gloss\":\"燃烧\"}}]}}")).unwrap();
        assert_eq!(d.lookup('火').unwrap().pron_count(), 1);
    }

    #[test]
    fn duplicate_character_is_positioned() {
        let line = r#"{"char":"火","prons":[{"p":"H UO3","gloss":"x"}]}"#;
        match parse(&format!("{HEADER}\n{line}\n{line}\n")) {
            Err(DictError::Line {
                line: 3,
                source: RecordError::DuplicateCharacter { ch: '火', first_line: 2 },
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn error_kinds() {
        let cases = [
            (r#"{"char":"火","prons":[]}"#, "no pronunciations"),
            (r#"{"char":"火火","prons":[{"p":"H","gloss":"x"}]}"#, "single"),
            (r#"{"char":"火","prons":[{"p":"  ","gloss":"x"}]}"#, "no phonemes"),
            (r#"{"char":"火","prons":[{"p":"H","gloss":"  "}]}"#, "empty gloss"),
            (r#"{"char":"火","prons":[{"p":"H","gloss":"\q"}]}"#, "escape"),
            (r#"{"char":"火""#, "malformed"),
        ];
        for (line, needle) in cases {
            let err = parse(&format!("{HEADER}\n{line}")).unwrap_err().to_string();
            assert!(err.starts_with("line 2:"), "{err}");
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
    }

    #[test]
    fn header_required() {
        assert!(matches!(parse("hello\n"), Err(DictError::MissingHeader(_))));
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn shared_pronunciation_senses_merge() {
        let line = r#"{"char":"行","prons":[{"p":"X ING2","gloss":"走"},{"p":"H ANG2","gloss":"行列"},{"p":"X ING2","gloss":"可以"}]}"#;
        let d = parse(&format!("{HEADER}\n{line}")).unwrap();
        let r = d.lookup('行').unwrap();
        assert_eq!(r.pron_count(), 2);
        assert_eq!(r.entries[0].gloss.tokens, vec!['走', '可', '以']);
    }

    #[test]
    fn gloss_cap_truncates_tail() {
        let line = r#"{"char":"火","prons":[{"p":"H UO3","gloss":"一二三四五"}]}"#;
        let d = parse_dictionary(
            format!("{HEADER}\n{line}").as_bytes(),
            &ParseOptions { max_gloss_tokens: 3 },
        )
        .unwrap();
        assert_eq!(d.lookup('火').unwrap().entries[0].gloss.tokens, vec!['一', '二', '三']);
    }

    #[test]
    fn lenient_accounts_for_every_line() {
        let good = r#"{"char":"火","prons":[{"p":"H UO3","gloss":"x"}]}"#;
        let text = format!("{HEADER}\n{good}\nnot json\n\n{good}\n{YUE}\n");
        let rep = parse_dictionary_lenient(text.as_bytes(), &ParseOptions::default()).unwrap();
        assert_eq!(rep.data_lines, 5);
        assert_eq!(rep.dictionary.len() + rep.errors.len(), rep.data_lines);
        let lines: Vec<usize> = rep.errors.iter().map(|(l, _)| *l).collect();
        assert_eq!(lines, vec![3, 4, 5]);
    }

    #[test]
    fn text_round_trip() {
        let d = parse(&format!("{HEADER}\n{YUE}\n")).unwrap();
        let mut buf = Vec::new();
        write_dictionary(&d, &mut buf).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), d);
    }
}
