use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::S2paError;

/// Context matchers a rule can test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    /// Previous character is one of the listed characters.
    PrevChar(Vec<char>),
    NextChar(Vec<char>),
    /// Current best pronunciation of the previous character has this tone.
    PrevTone(u32),
    NextTone(u32),
    SentenceStart,
    SentenceEnd,
    Position(usize),
}

impl Predicate {
    pub fn id(&self) -> &'static str {
        match self {
            Predicate::PrevChar(_) => "prev-char",
            Predicate::NextChar(_) => "next-char",
            Predicate::PrevTone(_) => "prev-tone",
            Predicate::NextTone(_) => "next-tone",
            Predicate::SentenceStart => "sentence-start",
            Predicate::SentenceEnd => "sentence-end",
            Predicate::Position(_) => "position",
        }
    }

    fn arg(&self) -> String {
        match self {
            Predicate::PrevChar(cs) | Predicate::NextChar(cs) => cs.iter().collect(),
            Predicate::PrevTone(t) | Predicate::NextTone(t) => t.to_string(),
            Predicate::Position(p) => p.to_string(),
            Predicate::SentenceStart | Predicate::SentenceEnd => "-".into(),
        }
    }

    fn parse(id: &str, arg: &str) -> Result<Self, String> {
        let chars = || -> Result<Vec<char>, String> {
            let cs: Vec<char> = arg.chars().collect();
            if cs.is_empty() || arg == "-" {
                Err(format!("{id} needs at least one character"))
            } else {
                Ok(cs)
            }
        };
        let number = || arg.parse::<usize>().map_err(|_| format!("{id} needs a number, got `{arg}`"));
        Ok(match id {
            "prev-char" => Predicate::PrevChar(chars()?),
            "next-char" => Predicate::NextChar(chars()?),
            "prev-tone" => Predicate::PrevTone(number()? as u32),
            "next-tone" => Predicate::NextTone(number()? as u32),
            "sentence-start" => Predicate::SentenceStart,
            "sentence-end" => Predicate::SentenceEnd,
            "position" => Predicate::Position(number()?),
            other => return Err(format!("unknown predicate `{other}`")),
        })
    }

    fn matches(&self, ctx: &OccurrenceContext<'_>) -> bool {
        let i = ctx.position;
        let prev = i.checked_sub(1);
        let next = (i + 1 < ctx.chars.len()).then_some(i + 1);
        match self {
            Predicate::PrevChar(cs) => prev.is_some_and(|p| cs.contains(&ctx.chars[p])),
            Predicate::NextChar(cs) => next.is_some_and(|n| cs.contains(&ctx.chars[n])),
            Predicate::PrevTone(t) => prev.is_some_and(|p| ctx.tone(p) == Some(*t)),
            Predicate::NextTone(t) => next.is_some_and(|n| ctx.tone(n) == Some(*t)),
            Predicate::SentenceStart => i == 0,
            Predicate::SentenceEnd => i + 1 == ctx.chars.len(),
            Predicate::Position(p) => i == *p,
        }
    }
}

/// One character occurrence. `tones[i]` is the tone of the current best
/// pronunciation of character `i`, if known.
#[derive(Debug, Clone, Copy)]
pub struct OccurrenceContext<'a> {
    pub chars: &'a [char],
    pub position: usize,
    pub tones: &'a [Option<u32>],
}

impl OccurrenceContext<'_> {
    pub fn character(&self) -> char {
        self.chars[self.position]
    }

    fn tone(&self, i: usize) -> Option<u32> {
        self.tones.get(i).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub character: char,
    pub predicate: Predicate,
    pub pron_index: usize,
}

/// Ordered rules; the first match for a character wins.
///
/// Text form, one rule per line, tab separated:
/// `character  predicate  argument  pron_index`. Lines starting with `#` and blank
/// lines are skipped; `-` stands for an absent argument.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self { rules }
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn forced_index(&self, ctx: &OccurrenceContext<'_>) -> Option<usize> {
        let ch = ctx.character();
        self.rules
            .iter()
            .find(|r| r.character == ch && r.predicate.matches(ctx))
            .map(|r| r.pron_index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, S2paError> {
        std::fs::read_to_string(path)?.parse()
    }
}

impl FromStr for RuleSet {
    type Err = S2paError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |reason: String| S2paError::RuleSyntax { line: line_no, reason };
            let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
            let [ch, pred, arg, idx] = fields[..] else {
                return Err(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
            };
            let mut cs = ch.chars();
            let character = match (cs.next(), cs.next()) {
                (Some(c), None) => c,
                _ => return Err(err(format!("`{ch}` is not a single character"))),
            };
            let predicate = Predicate::parse(pred, arg).map_err(err)?;
            let pron_index = idx.parse().map_err(|_| err(format!("bad pronunciation index `{idx}`")))?;
            rules.push(Rule {
                character,
                predicate,
                pron_index,
            });
        }
        Ok(Self { rules })
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{}\t{}\t{}\t{}", r.character, r.predicate.id(), r.predicate.arg(), r.pron_index)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(chars: &'a [char], position: usize, tones: &'a [Option<u32>]) -> OccurrenceContext<'a> {
        OccurrenceContext { chars, position, tones }
    }

    #[test]
    fn parse_and_display_round_trip() {
        let text = "# yi\n一\tnext-tone\t4\t1\n\n一\tsentence-end\t-\t0\n行\tprev-char\t银\t1\n";
        let rules: RuleSet = text.parse().unwrap();
        assert_eq!(rules.len(), 3);
        let again: RuleSet = rules.to_string().parse().unwrap();
        assert_eq!(again, rules);
    }

    #[test]
    fn syntax_errors_carry_line() {
        for bad in ["一\tnext-tone\t4", "一二\tposition\t0\t0", "一\tfoo\t-\t0", "一\tnext-tone\tx\t0"] {
            let e = format!("\n{bad}\n").parse::<RuleSet>().unwrap_err();
            assert!(matches!(e, S2paError::RuleSyntax { line: 2, .. }), "{bad}: {e}");
        }
    }

    #[test]
    fn first_match_wins() {
        let rules: RuleSet = "一\tsentence-start\t-\t0\n一\tnext-tone\t4\t1\n".parse().unwrap();
        let chars = ['一', '个'];
        let tones = [Some(1), Some(4)];
        assert_eq!(rules.forced_index(&ctx(&chars, 0, &tones)), Some(0));
        let chars = ['看', '一', '个'];
        let tones = [Some(4), Some(1), Some(4)];
        assert_eq!(rules.forced_index(&ctx(&chars, 1, &tones)), Some(1));
        let tones = [Some(4), Some(1), Some(2)];
        assert_eq!(rules.forced_index(&ctx(&chars, 1, &tones)), None);
    }

    #[test]
    fn apply_forces_or_keeps() {
        let rules: RuleSet = "一\tnext-char\t个\t0\n".parse().unwrap();
        let chars = ['一', '个'];
        let tones = [None, None];
        let mut w = vec![0.3, 0.7];
        assert!(super::super::apply_rules(&mut w, &ctx(&chars, 0, &tones), &rules).unwrap());
        assert_eq!(w, vec![1.0, 0.0]);
        let chars = ['一', '天'];
        let mut w = vec![0.3, 0.7];
        assert!(!super::super::apply_rules(&mut w, &ctx(&chars, 0, &tones), &rules).unwrap());
        assert_eq!(w, vec![0.3, 0.7]);
        let rules: RuleSet = "一\tsentence-start\t-\t5\n".parse().unwrap();
        assert!(matches!(
            super::super::apply_rules(&mut w, &ctx(&chars, 0, &tones), &rules),
            Err(S2paError::ForcedIndex { index: 5, m: 2, .. })
        ));
    }
}
