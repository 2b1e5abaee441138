//! Parser for the toy function language used by the bundled corpus:
//!
//! ```text
//! func   := "def" NAME "(" [NAME ("," NAME)*] ")" ":" "return" expr
//! expr   := term (("+" | "-") term)*
//! term   := atom (("*" | "/") atom)*
//! atom   := NUM | NAME | NAME "(" [expr ("," expr)*] ")" | "(" expr ")"
//! ```

use super::sample::AstGraph;
use super::tokenize::split_identifier;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Kind {
    Def,
    Return,
    Name(String),
    Num(String),
    Punct(char),
}

#[derive(Clone, Debug)]
struct Lexeme {
    kind: Kind,
    offset: usize,
}

fn lex(source: &str) -> Result<Vec<Lexeme>> {
    let mut out = Vec::new();
    let mut chars = source.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c.is_ascii_alphabetic() || c == '_' {
            let mut word = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    word.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            let kind = match word.as_str() {
                "def" => Kind::Def,
                "return" => Kind::Return,
                _ => Kind::Name(word),
            };
            out.push(Lexeme { kind, offset: start });
        } else if c.is_ascii_digit() {
            let mut num = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_ascii_digit() {
                    num.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push(Lexeme {
                kind: Kind::Num(num),
                offset: start,
            });
        } else if "(),:+-*/".contains(c) {
            out.push(Lexeme {
                kind: Kind::Punct(c),
                offset: start,
            });
            chars.next();
        } else {
            return Err(Error::Syntax {
                offset: start,
                msg: format!("unexpected character {c:?}"),
            });
        }
    }
    Ok(out)
}

struct Parser {
    lexemes: Vec<Lexeme>,
    pos: usize,
    end: usize,
    labels: Vec<String>,
    edges: Vec<(usize, usize)>,
}

impl Parser {
    fn peek(&self) -> Option<&Kind> {
        self.lexemes.get(self.pos).map(|l| &l.kind)
    }

    fn offset(&self) -> usize {
        self.lexemes.get(self.pos).map_or(self.end, |l| l.offset)
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            offset: self.offset(),
            msg: msg.into(),
        })
    }

    fn expect(&mut self, kind: Kind, what: &str) -> Result<()> {
        if self.peek() == Some(&kind) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected {what}"))
        }
    }

    fn name(&mut self) -> Result<String> {
        match self.peek() {
            Some(Kind::Name(n)) => {
                let n = n.clone();
                self.pos += 1;
                Ok(n)
            }
            _ => self.error("expected a name"),
        }
    }

    fn node(&mut self, label: String, parent: Option<usize>) -> usize {
        self.labels.push(label);
        let id = self.labels.len() - 1;
        if let Some(p) = parent {
            self.edges.push((p, id));
        }
        id
    }

    fn func(&mut self) -> Result<()> {
        self.expect(Kind::Def, "'def'")?;
        let func = self.node("Func".into(), None);
        let name = self.name()?;
        self.node(format!("Name:{name}"), Some(func));
        let params = self.node("Params".into(), Some(func));
        self.params(params)?;
        self.expect(Kind::Punct(':'), "':'")?;
        let body = self.node("Body".into(), Some(func));
        self.expect(Kind::Return, "'return'")?;
        let ret = self.node("Return".into(), Some(body));
        self.expr(ret)?;
        if self.pos != self.lexemes.len() {
            return self.error("trailing input after expression");
        }
        Ok(())
    }

    /// Any malformation inside the parameter list is reported at its `(`.
    fn params(&mut self, parent: usize) -> Result<()> {
        let open = self.offset();
        let fail = || Error::Syntax {
            offset: open,
            msg: "malformed parameter list".into(),
        };
        self.expect(Kind::Punct('('), "'('")?;
        if self.peek() == Some(&Kind::Punct(')')) {
            self.pos += 1;
            return Ok(());
        }
        loop {
            let name = self.name().map_err(|_| fail())?;
            self.node(format!("Name:{name}"), Some(parent));
            match self.peek() {
                Some(Kind::Punct(',')) => self.pos += 1,
                Some(Kind::Punct(')')) => {
                    self.pos += 1;
                    return Ok(());
                }
                _ => return Err(fail()),
            }
        }
    }

    /// Parses an expression whose root node hangs under `parent`.
    fn expr(&mut self, parent: usize) -> Result<usize> {
        self.binary(parent, &['+', '-'], Self::term)
    }

    fn term(&mut self, parent: usize) -> Result<usize> {
        self.binary(parent, &['*', '/'], Self::atom)
    }

    fn binary(&mut self, parent: usize, ops: &[char], sub: fn(&mut Self, usize) -> Result<usize>) -> Result<usize> {
        let mark = self.labels.len();
        let mut left = sub(self, parent)?;
        while let Some(Kind::Punct(c)) = self.peek() {
            if !ops.contains(c) {
                break;
            }
            let op = *c;
            self.pos += 1;
            // Move `left` (and its subtree) under a new BinOp node.
            let bin = self.insert_parent(left, mark, parent, format!("BinOp:{op}"));
            left = bin;
            sub(self, bin)?;
        }
        Ok(left)
    }

    /// Insert a node labelled `label` between `parent` and `child`, keeping
    /// preorder numbering: the new node takes `child`'s slot at `mark`.
    fn insert_parent(&mut self, child: usize, mark: usize, parent: usize, label: String) -> usize {
        debug_assert_eq!(child, mark);
        self.labels.insert(mark, label);
        for e in &mut self.edges {
            if e.0 >= mark {
                e.0 += 1;
            }
            if e.1 >= mark {
                e.1 += 1;
            }
        }
        let child = child + 1;
        for e in &mut self.edges {
            if e.1 == child && e.0 == parent {
                e.0 = mark;
            }
        }
        self.edges.push((parent, mark));
        self.edges.sort_by_key(|e| e.1);
        mark
    }

    fn atom(&mut self, parent: usize) -> Result<usize> {
        match self.peek().cloned() {
            Some(Kind::Num(n)) => {
                self.pos += 1;
                Ok(self.node(format!("Num:{n}"), Some(parent)))
            }
            Some(Kind::Name(n)) => {
                self.pos += 1;
                if self.peek() == Some(&Kind::Punct('(')) {
                    self.pos += 1;
                    let call = self.node(format!("Call:{n}"), Some(parent));
                    if self.peek() == Some(&Kind::Punct(')')) {
                        self.pos += 1;
                        return Ok(call);
                    }
                    loop {
                        self.expr(call)?;
                        match self.peek() {
                            Some(Kind::Punct(',')) => self.pos += 1,
                            Some(Kind::Punct(')')) => {
                                self.pos += 1;
                                return Ok(call);
                            }
                            _ => return self.error("expected ',' or ')' in call"),
                        }
                    }
                }
                Ok(self.node(format!("Name:{n}"), Some(parent)))
            }
            Some(Kind::Punct('(')) => {
                self.pos += 1;
                let inner = self.expr(parent)?;
                self.expect(Kind::Punct(')'), "')'")?;
                Ok(inner)
            }
            _ => self.error("expected an expression"),
        }
    }
}

/// Lex and parse one toy function into code subtokens and its AST.
pub fn parse_toy(source: &str) -> Result<(Vec<String>, AstGraph)> {
    let lexemes = lex(source)?;
    let tokens = lexemes
        .iter()
        .flat_map(|l| match &l.kind {
            Kind::Def => vec!["def".to_string()],
            Kind::Return => vec!["return".to_string()],
            Kind::Name(n) => split_identifier(n),
            Kind::Num(n) => vec![n.clone()],
            Kind::Punct(c) => vec![c.to_string()],
        })
        .collect();
    let mut parser = Parser {
        lexemes,
        pos: 0,
        end: source.len(),
        labels: Vec::new(),
        edges: Vec::new(),
    };
    parser.func()?;
    let mut edges = parser.edges;
    edges.sort_by_key(|e| e.1);
    Ok((
        tokens,
        AstGraph {
            node_labels: parser.labels,
            edges,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(g: &AstGraph) -> Vec<&str> {
        g.node_labels.iter().map(String::as_str).collect()
    }

    #[test]
    fn identity_function() {
        let (tokens, ast) = parse_toy("def f(x): return x").unwrap();
        assert_eq!(tokens, vec!["def", "f", "(", "x", ")", ":", "return", "x"]);
        assert_eq!(
            labels(&ast),
            vec!["Func", "Name:f", "Params", "Name:x", "Body", "Return", "Name:x"]
        );
        assert_eq!(ast.edges, vec![(0, 1), (0, 2), (2, 3), (0, 4), (4, 5), (5, 6)]);
        assert!(ast.is_tree());
    }

    #[test]
    fn call_children() {
        let (_, ast) = parse_toy("def g(a,b): return add(a,b)").unwrap();
        let call = ast.node_labels.iter().position(|l| l == "Call:add").unwrap();
        let ret = ast.node_labels.iter().position(|l| l == "Return").unwrap();
        assert!(ast.edges.contains(&(ret, call)));
        let kids: Vec<&str> = ast
            .edges
            .iter()
            .filter(|e| e.0 == call)
            .map(|e| ast.node_labels[e.1].as_str())
            .collect();
        assert_eq!(kids, vec!["Name:a", "Name:b"]);
        assert!(ast.is_tree());
    }

    #[test]
    fn binary_operators_nest() {
        let (tokens, ast) = parse_toy("def getMaxValue(x, k): return max(x, 2) * 3 + k").unwrap();
        assert!(tokens.starts_with(&["def".into(), "get".into(), "max".into(), "value".into()]));
        assert!(ast.is_tree());
        assert_eq!(
            labels(&ast),
            vec![
                "Func", "Name:getMaxValue", "Params", "Name:x", "Name:k", "Body", "Return", "BinOp:+",
                "BinOp:*", "Call:max", "Name:x", "Num:2", "Num:3", "Name:k"
            ]
        );
        let plus = 7;
        let times = 8;
        assert!(ast.edges.contains(&(6, plus)));
        assert!(ast.edges.contains(&(plus, times)));
        assert!(ast.edges.contains(&(plus, 13)));
        assert!(ast.edges.contains(&(times, 9)));
        assert!(ast.edges.contains(&(times, 12)));
    }

    #[test]
    fn left_associative_chain() {
        let (_, ast) = parse_toy("def f(a, b, c): return a - b - c").unwrap();
        assert!(ast.is_tree());
        assert_eq!(
            labels(&ast)[7..].to_vec(),
            vec!["Return", "BinOp:-", "BinOp:-", "Name:a", "Name:b", "Name:c"]
        );
    }

    #[test]
    fn malformed_params_report_open_paren() {
        match parse_toy("def h(: return") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn other_errors() {
        assert!(parse_toy("def f(x) return x").is_err());
        assert!(parse_toy("def f(x): return").is_err());
        assert!(parse_toy("def f(x): return x x").is_err());
        assert!(parse_toy("def f(x): return $").is_err());
    }
}
