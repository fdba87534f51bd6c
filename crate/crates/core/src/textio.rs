//! Line-oriented reader shared by the textual file formats.

use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) struct LineReader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            line_no: 0,
        }
    }

    fn skip_blank(&mut self) {
        while let Some((_, l)) = self.lines.peek() {
            if l.trim().is_empty() {
                self.lines.next();
            } else {
                break;
            }
        }
    }

    /// Next non-blank line split on whitespace.
    pub(crate) fn next_tokens(&mut self) -> Result<Vec<&'a str>> {
        self.skip_blank();
        match self.lines.next() {
            Some((i, l)) => {
                self.line_no = i + 1;
                Ok(l.split_whitespace().collect())
            }
            None => Err(Error::parse(self.line_no + 1, "unexpected end of input")),
        }
    }

    /// First token of the next non-blank line, without consuming it.
    pub(crate) fn peek_keyword(&mut self) -> Option<&'a str> {
        self.skip_blank();
        self.lines.peek().and_then(|(_, l)| l.split_whitespace().next())
    }

    pub(crate) fn parse_token<T: FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse::<T>()
            .map_err(|_| self.error(format!("cannot parse `{tok}`")))
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.line_no, msg)
    }

    pub(crate) fn expect_end(&mut self) -> Result<()> {
        self.skip_blank();
        match self.lines.peek() {
            None => Ok(()),
            Some((i, _)) => Err(Error::parse(i + 1, "trailing content")),
        }
    }
}
