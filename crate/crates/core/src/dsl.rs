//! Action programs: a small call-expression language for scene transformations.
//!
//! ```text
//! program  := call
//! call     := NAME ( "(" [ args ] ")" )?
//! args     := arg ( "," arg )*
//! arg      := [ NAME "=" ] value
//! value    := NUMBER | NAME | call | "[" [ value ( "," value )* ] "]"
//! ```
//!
//! Primitives and their parameters, in positional order:
//!
//! | primitive     | parameters                         | defaults          |
//! |---------------|------------------------------------|-------------------|
//! | `rotate`      | `object`, `yaw` (degrees)          | `object`, 0       |
//! | `translate`   | `object`, `dx`, `dy`, `dz` (m)     | `object`, 0, 0, 0 |
//! | `scale`       | `object`, `factor` (> 0)           | `object`, 1       |
//! | `move_camera` | `path` (name or `[[x, y, z], ...]`)| `static`          |
//! | `compose`     | `[call, ...]` (non-empty)          | none              |
//!
//! Primitive names are case-insensitive and a bare name (`rotate`) is a call
//! with all defaults. Yaw is normalized into `[0, 360)`.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRAMMAR_VERSION: &str = "action-dsl/1";
pub const MAX_COMPOSE_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown primitive `{name}` at {line}:{column}")]
    UnknownPrimitive {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("argument `{arg}` at {line}:{column} must be numeric")]
    NonNumeric {
        arg: String,
        line: usize,
        column: usize,
    },
    #[error("argument `{arg}` at {line}:{column}: {message}")]
    BadArgument {
        arg: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("factor must be positive, got {factor} at {line}:{column}")]
    NonPositiveFactor {
        factor: f64,
        line: usize,
        column: usize,
    },
    #[error("compose at {line}:{column} needs at least one child")]
    EmptyComposition { line: usize, column: usize },
    #[error("compose nesting deeper than {MAX_COMPOSE_DEPTH} at {line}:{column}")]
    TooDeep { line: usize, column: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("sampling step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("camera-motion program sampled in a task whose camera is locked")]
    CameraLocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraPath {
    Named(String),
    Waypoints(Vec<[f64; 3]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionPrimitive {
    Rotation {
        object: String,
        yaw_deg: f64,
    },
    Translation {
        object: String,
        dx: f64,
        dy: f64,
        dz: f64,
    },
    Scaling {
        object: String,
        factor: f64,
    },
    CameraMotion {
        path: CameraPath,
    },
    Composition {
        children: Vec<ActionPrimitive>,
    },
}

impl ActionPrimitive {
    pub fn rotate(object: impl Into<String>, yaw_deg: f64) -> Self {
        ActionPrimitive::Rotation {
            object: object.into(),
            yaw_deg: normalize_yaw(yaw_deg),
        }
    }

    /// Leaves in execution order.
    pub fn leaves(&self) -> Vec<&ActionPrimitive> {
        match self {
            ActionPrimitive::Composition { children } => {
                children.iter().flat_map(|c| c.leaves()).collect()
            }
            leaf => vec![leaf],
        }
    }

    /// Number of nested `compose` levels (0 for a leaf).
    pub fn compose_depth(&self) -> usize {
        match self {
            ActionPrimitive::Composition { children } => {
                1 + children.iter().map(|c| c.compose_depth()).max().unwrap_or(0)
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionProgram {
    pub root: ActionPrimitive,
    pub source_text: String,
    pub version: String,
}

impl PartialEq for ActionProgram {
    /// Structural equality; source text is not compared.
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl ActionProgram {
    pub fn new(root: ActionPrimitive) -> Self {
        let mut program = ActionProgram {
            root,
            source_text: String::new(),
            version: GRAMMAR_VERSION.to_string(),
        };
        program.source_text = print_program(&program);
        program
    }

    pub fn canonical(&self) -> String {
        print_program(self)
    }
}

pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = yaw.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if y >= 360.0 || y == 0.0 {
        0.0
    } else {
        y
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Num(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Eq,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, DslError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            '=' => Some(Tok::Eq),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token {
                tok,
                line: tl,
                column: tc,
            });
            i += 1;
            col += 1;
            continue;
        }
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let name: String = chars[start..i].iter().collect();
            col += i - start;
            out.push(Token {
                tok: Tok::Name(name),
                line: tl,
                column: tc,
            });
            continue;
        }
        if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' {
            let start = i;
            if c == '-' || c == '+' {
                i += 1;
            }
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let save = i;
                i += 1;
                if i < chars.len() && (chars[i] == '-' || chars[i] == '+') {
                    i += 1;
                }
                if i < chars.len() && chars[i].is_ascii_digit() {
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let lexeme: String = chars[start..i].iter().collect();
            col += i - start;
            let value: f64 = lexeme.parse().map_err(|_| DslError::Syntax {
                line: tl,
                column: tc,
                message: format!("malformed number `{lexeme}`"),
            })?;
            if !value.is_finite() {
                return Err(DslError::Syntax {
                    line: tl,
                    column: tc,
                    message: format!("number `{lexeme}` is out of range"),
                });
            }
            out.push(Token {
                tok: Tok::Num(value),
                line: tl,
                column: tc,
            });
            continue;
        }
        return Err(DslError::Syntax {
            line: tl,
            column: tc,
            message: format!("unexpected character `{c}`"),
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone)]
enum Value {
    Num(f64),
    Name(String),
    Call(Call),
    List(Vec<Node>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Value,
    line: usize,
    column: usize,
}

#[derive(Debug, Clone)]
struct Arg {
    key: Option<(String, usize, usize)>,
    node: Node,
}

#[derive(Debug, Clone)]
struct Call {
    name: String,
    args: Vec<Arg>,
    line: usize,
    column: usize,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)].tok
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, message: impl Into<String>) -> DslError {
        let t = self.peek();
        DslError::Syntax {
            line: t.line,
            column: t.column,
            message: message.into(),
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, DslError> {
        if self.peek().tok == want {
            Ok(self.bump())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn call(&mut self) -> Result<Call, DslError> {
        let t = self.bump();
        let Tok::Name(name) = t.tok else {
            return Err(DslError::Syntax {
                line: t.line,
                column: t.column,
                message: "expected a primitive name".into(),
            });
        };
        let mut args = Vec::new();
        if self.peek().tok == Tok::LParen {
            self.bump();
            if self.peek().tok != Tok::RParen {
                loop {
                    args.push(self.arg()?);
                    if self.peek().tok == Tok::Comma {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RParen, "`)`")?;
        }
        Ok(Call {
            name,
            args,
            line: t.line,
            column: t.column,
        })
    }

    fn arg(&mut self) -> Result<Arg, DslError> {
        let key = match (&self.peek().tok, self.peek2()) {
            (Tok::Name(n), Tok::Eq) => {
                let (n, line, column) = (n.clone(), self.peek().line, self.peek().column);
                self.bump();
                self.bump();
                Some((n.to_ascii_lowercase(), line, column))
            }
            _ => None,
        };
        Ok(Arg {
            key,
            node: self.value()?,
        })
    }

    fn value(&mut self) -> Result<Node, DslError> {
        let t = self.peek().clone();
        let value = match &t.tok {
            Tok::Num(v) => {
                self.bump();
                Value::Num(*v)
            }
            Tok::Name(n) => {
                if *self.peek2() == Tok::LParen {
                    Value::Call(self.call()?)
                } else {
                    self.bump();
                    Value::Name(n.clone())
                }
            }
            Tok::LBracket => {
                self.bump();
                let mut items = Vec::new();
                if self.peek().tok != Tok::RBracket {
                    loop {
                        items.push(self.value()?);
                        if self.peek().tok == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(Tok::RBracket, "`]`")?;
                Value::List(items)
            }
            _ => return Err(self.err("expected a value")),
        };
        Ok(Node {
            value,
            line: t.line,
            column: t.column,
        })
    }
}

/// Bind positional and keyword arguments to a fixed parameter list.
fn bind<'a>(call: &'a Call, params: &[&str]) -> Result<Vec<Option<&'a Node>>, DslError> {
    let mut slots: Vec<Option<&Node>> = vec![None; params.len()];
    let mut next_positional = 0usize;
    let mut seen_keyword = false;
    for arg in &call.args {
        let (idx, line, column, name) = match &arg.key {
            Some((k, line, column)) => {
                seen_keyword = true;
                let idx = params
                    .iter()
                    .position(|p| p == k)
                    .ok_or_else(|| DslError::BadArgument {
                        arg: k.clone(),
                        line: *line,
                        column: *column,
                        message: format!("`{}` takes no such argument", call.name),
                    })?;
                (idx, *line, *column, k.clone())
            }
            None => {
                if seen_keyword {
                    return Err(DslError::Syntax {
                        line: arg.node.line,
                        column: arg.node.column,
                        message: "positional argument after keyword argument".into(),
                    });
                }
                let idx = next_positional;
                next_positional += 1;
                if idx >= params.len() {
                    return Err(DslError::BadArgument {
                        arg: format!("#{}", idx + 1),
                        line: arg.node.line,
                        column: arg.node.column,
                        message: format!("too many arguments to `{}`", call.name),
                    });
                }
                (idx, arg.node.line, arg.node.column, params[idx].to_string())
            }
        };
        if slots[idx].is_some() {
            return Err(DslError::BadArgument {
                arg: name,
                line,
                column,
                message: "given more than once".into(),
            });
        }
        slots[idx] = Some(&arg.node);
    }
    Ok(slots)
}

fn number(node: Option<&Node>, arg: &str, default: f64) -> Result<f64, DslError> {
    match node {
        None => Ok(default),
        Some(Node {
            value: Value::Num(v),
            ..
        }) => Ok(*v),
        Some(n) => Err(DslError::NonNumeric {
            arg: arg.to_string(),
            line: n.line,
            column: n.column,
        }),
    }
}

fn ident(node: Option<&Node>, arg: &str, default: &str) -> Result<String, DslError> {
    match node {
        None => Ok(default.to_string()),
        Some(Node {
            value: Value::Name(n),
            ..
        }) => Ok(n.clone()),
        Some(n) => Err(DslError::BadArgument {
            arg: arg.to_string(),
            line: n.line,
            column: n.column,
            message: "expected an identifier".into(),
        }),
    }
}

fn build(call: &Call, depth: usize) -> Result<ActionPrimitive, DslError> {
    let lower = call.name.to_ascii_lowercase();
    match lower.as_str() {
        "rotate" => {
            let a = bind(call, &["object", "yaw"])?;
            Ok(ActionPrimitive::rotate(
                ident(a[0], "object", "object")?,
                number(a[1], "yaw", 0.0)?,
            ))
        }
        "translate" => {
            let a = bind(call, &["object", "dx", "dy", "dz"])?;
            Ok(ActionPrimitive::Translation {
                object: ident(a[0], "object", "object")?,
                dx: number(a[1], "dx", 0.0)? + 0.0,
                dy: number(a[2], "dy", 0.0)? + 0.0,
                dz: number(a[3], "dz", 0.0)? + 0.0,
            })
        }
        "scale" => {
            let a = bind(call, &["object", "factor"])?;
            let factor = number(a[1], "factor", 1.0)?;
            if factor <= 0.0 {
                let (line, column) = a[1].map_or((call.line, call.column), |n| (n.line, n.column));
                return Err(DslError::NonPositiveFactor {
                    factor,
                    line,
                    column,
                });
            }
            Ok(ActionPrimitive::Scaling {
                object: ident(a[0], "object", "object")?,
                factor,
            })
        }
        "move_camera" => {
            let a = bind(call, &["path"])?;
            let path = match a[0] {
                None => CameraPath::Named("static".into()),
                Some(Node {
                    value: Value::Name(n),
                    ..
                }) => CameraPath::Named(n.clone()),
                Some(Node {
                    value: Value::List(items),
                    ..
                }) => CameraPath::Waypoints(
                    items
                        .iter()
                        .map(waypoint)
                        .collect::<Result<Vec<_>, _>>()?,
                ),
                Some(n) => {
                    return Err(DslError::BadArgument {
                        arg: "path".into(),
                        line: n.line,
                        column: n.column,
                        message: "expected a path name or a waypoint list".into(),
                    })
                }
            };
            Ok(ActionPrimitive::CameraMotion { path })
        }
        "compose" => {
            if depth >= MAX_COMPOSE_DEPTH {
                return Err(DslError::TooDeep {
                    line: call.line,
                    column: call.column,
                });
            }
            let a = bind(call, &["children"])?;
            let items = match a[0] {
                None => Vec::new(),
                Some(Node {
                    value: Value::List(items),
                    ..
                }) => items.clone(),
                Some(n) => {
                    return Err(DslError::BadArgument {
                        arg: "children".into(),
                        line: n.line,
                        column: n.column,
                        message: "expected a bracketed list of actions".into(),
                    })
                }
            };
            if items.is_empty() {
                return Err(DslError::EmptyComposition {
                    line: call.line,
                    column: call.column,
                });
            }
            let children = items
                .iter()
                .map(|item| match &item.value {
                    Value::Call(c) => build(c, depth + 1),
                    Value::Name(n) => build(
                        &Call {
                            name: n.clone(),
                            args: Vec::new(),
                            line: item.line,
                            column: item.column,
                        },
                        depth + 1,
                    ),
                    _ => Err(DslError::BadArgument {
                        arg: "children".into(),
                        line: item.line,
                        column: item.column,
                        message: "expected an action".into(),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ActionPrimitive::Composition { children })
        }
        _ => Err(DslError::UnknownPrimitive {
            name: call.name.clone(),
            line: call.line,
            column: call.column,
        }),
    }
}

fn waypoint(node: &Node) -> Result<[f64; 3], DslError> {
    let bad = || DslError::BadArgument {
        arg: "path".into(),
        line: node.line,
        column: node.column,
        message: "waypoints are [x, y, z] triples".into(),
    };
    let Value::List(items) = &node.value else {
        return Err(bad());
    };
    if items.len() != 3 {
        return Err(bad());
    }
    let mut out = [0.0; 3];
    for (slot, item) in out.iter_mut().zip(items) {
        *slot = number(Some(item), "path", 0.0)? + 0.0;
    }
    Ok(out)
}

pub fn parse_program(text: &str) -> Result<ActionProgram, DslError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
    };
    let call = p.call()?;
    if p.peek().tok != Tok::Eof {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(ActionProgram {
        root: build(&call, 0)?,
        source_text: text.to_string(),
        version: GRAMMAR_VERSION.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Canonical printer

struct Num(f64);

impl fmt::Display for Num {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Display is the shortest representation that reads back exactly.
        write!(f, "{}", self.0 + 0.0)
    }
}

fn print_into(p: &ActionPrimitive, out: &mut String) {
    match p {
        ActionPrimitive::Rotation { object, yaw_deg } => {
            let _ = write!(out, "rotate({object}, yaw={})", Num(*yaw_deg));
        }
        ActionPrimitive::Translation { object, dx, dy, dz } => {
            let _ = write!(
                out,
                "translate({object}, dx={}, dy={}, dz={})",
                Num(*dx),
                Num(*dy),
                Num(*dz)
            );
        }
        ActionPrimitive::Scaling { object, factor } => {
            let _ = write!(out, "scale({object}, factor={})", Num(*factor));
        }
        ActionPrimitive::CameraMotion { path } => match path {
            CameraPath::Named(n) => {
                let _ = write!(out, "move_camera(path={n})");
            }
            CameraPath::Waypoints(ws) => {
                out.push_str("move_camera(path=[");
                for (i, w) in ws.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    let _ = write!(out, "[{}, {}, {}]", Num(w[0]), Num(w[1]), Num(w[2]));
                }
                out.push_str("])");
            }
        },
        ActionPrimitive::Composition { children } => {
            out.push_str("compose([");
            for (i, c) in children.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                print_into(c, out);
            }
            out.push_str("])");
        }
    }
}

pub fn print_program(program: &ActionProgram) -> String {
    let mut out = String::new();
    print_into(&program.root, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SamplingMode {
    ImageEndpoints,
    VideoDense { step_deg: f64 },
}

/// Offset from the source state at one sampled instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDelta {
    pub index: usize,
    /// Fraction of the program completed, in `[0, 1]`.
    pub progress: f64,
    pub yaw_deg: f64,
    pub translation: [f64; 3],
    pub scale_factor: f64,
    /// Camera path progress; always 0 for programs without camera motion.
    pub camera_progress: f64,
    /// Set on a terminal state whose step was cut short to land on the target.
    pub clamped: bool,
}

struct Totals {
    yaw: f64,
    translation: [f64; 3],
    scale: f64,
    camera: bool,
}

fn totals(program: &ActionProgram) -> Totals {
    let mut t = Totals {
        yaw: 0.0,
        translation: [0.0; 3],
        scale: 1.0,
        camera: false,
    };
    for leaf in program.root.leaves() {
        match leaf {
            ActionPrimitive::Rotation { yaw_deg, .. } => t.yaw += yaw_deg,
            ActionPrimitive::Translation { dx, dy, dz, .. } => {
                t.translation[0] += dx;
                t.translation[1] += dy;
                t.translation[2] += dz;
            }
            ActionPrimitive::Scaling { factor, .. } => t.scale *= factor,
            ActionPrimitive::CameraMotion { .. } => t.camera = true,
            ActionPrimitive::Composition { .. } => unreachable!("leaves are never compositions"),
        }
    }
    t
}

fn delta_at(t: &Totals, index: usize, progress: f64, yaw: f64, clamped: bool) -> StateDelta {
    StateDelta {
        index,
        progress,
        yaw_deg: yaw,
        translation: t.translation.map(|v| v * progress),
        scale_factor: 1.0 + (t.scale - 1.0) * progress,
        camera_progress: if t.camera { progress } else { 0.0 },
        clamped,
    }
}

/// Sample the program's trajectory.
///
/// The swept parameter is the program's total yaw. Programs without rotation
/// sample their two endpoints in either mode (one state if the program is
/// the identity).
pub fn sample_states(
    program: &ActionProgram,
    mode: SamplingMode,
    camera_locked: bool,
) -> Result<Vec<StateDelta>, SamplingError> {
    let t = totals(program);
    if t.camera && camera_locked {
        return Err(SamplingError::CameraLocked);
    }
    let step = match mode {
        SamplingMode::ImageEndpoints => None,
        SamplingMode::VideoDense { step_deg } => {
            if !(step_deg > 0.0) || !step_deg.is_finite() {
                return Err(SamplingError::NonPositiveStep(step_deg));
            }
            Some(step_deg)
        }
    };
    let sweep = t.yaw;
    let source = delta_at(&t, 0, 0.0, 0.0, false);
    let terminal = |index, clamped| delta_at(&t, index, 1.0, sweep, clamped);

    match step {
        Some(step) if sweep > 0.0 => {
            let n = (sweep / step).ceil() as usize;
            let mut out = Vec::with_capacity(n + 1);
            out.push(source);
            for i in 1..n {
                let yaw = step * i as f64;
                out.push(delta_at(&t, i, yaw / sweep, yaw, false));
            }
            let divides = (step * n as f64 - sweep).abs() <= 1e-9 * sweep.max(1.0);
            out.push(terminal(n, !divides));
            Ok(out)
        }
        _ => {
            let identity = sweep == 0.0
                && t.translation == [0.0; 3]
                && t.scale == 1.0
                && !t.camera;
            if identity && step.is_some() {
                Ok(vec![source])
            } else {
                Ok(vec![source, terminal(1, false)])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub objects: BTreeSet<String>,
    /// Task-locked parameters: any of `camera`, `yaw`, `translation`, `scale`.
    pub locked: BTreeSet<String>,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
}

impl SceneManifest {
    /// The object-rotation task: scene and camera stay fixed.
    pub fn rotation_task<I, S>(objects: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        SceneManifest {
            objects: objects.into_iter().map(Into::into).collect(),
            locked: ["camera".to_string()].into_iter().collect(),
            scale_range: (0.25, 4.0),
            max_translation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    UnknownObject(String),
    LockedParameter(String),
    OutOfRange { parameter: String, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownObject(o) => write!(f, "unknown object {o}"),
            Violation::LockedParameter(p) => write!(f, "task-locked parameter: {p}"),
            Violation::OutOfRange { parameter, value } => {
                write!(f, "parameter {parameter} out of range: {value}")
            }
        }
    }
}

pub fn validate_program(
    program: &ActionProgram,
    manifest: &SceneManifest,
) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let check_object = |o: &str, out: &mut Vec<Violation>| {
        if !manifest.objects.contains(o) {
            out.push(Violation::UnknownObject(o.to_string()));
        }
    };
    let locked = |p: &str| manifest.locked.contains(p);
    for leaf in program.root.leaves() {
        match leaf {
            ActionPrimitive::Rotation { object, .. } => {
                check_object(object, &mut out);
                if locked("yaw") {
                    out.push(Violation::LockedParameter("yaw".into()));
                }
            }
            ActionPrimitive::Translation { object, dx, dy, dz } => {
                check_object(object, &mut out);
                if locked("translation") {
                    out.push(Violation::LockedParameter("translation".into()));
                }
                for (name, v) in [("dx", dx), ("dy", dy), ("dz", dz)] {
                    if v.abs() > manifest.max_translation {
                        out.push(Violation::OutOfRange {
                            parameter: name.into(),
                            value: *v,
                        });
                    }
                }
            }
            ActionPrimitive::Scaling { object, factor } => {
                check_object(object, &mut out);
                if locked("scale") {
                    out.push(Violation::LockedParameter("scale".into()));
                }
                let (lo, hi) = manifest.scale_range;
                if *factor < lo || *factor > hi {
                    out.push(Violation::OutOfRange {
                        parameter: "factor".into(),
                        value: *factor,
                    });
                }
            }
            ActionPrimitive::CameraMotion { .. } => {
                if locked("camera") {
                    out.push(Violation::LockedParameter("camera".into()));
                }
            }
            ActionPrimitive::Composition { .. } => {}
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yaws(states: &[StateDelta]) -> Vec<f64> {
        states.iter().map(|s| s.yaw_deg).collect()
    }

    #[test]
    fn parses_table_examples() {
        let p = parse_program("rotate(object, yaw=90)").unwrap();
        assert_eq!(
            p.root,
            ActionPrimitive::Rotation {
                object: "object".into(),
                yaw_deg: 90.0
            }
        );
        let c = parse_program("compose([rotate, translate])").unwrap();
        match &c.root {
            ActionPrimitive::Composition { children } => {
                assert_eq!(children.len(), 2);
                assert!(matches!(children[1], ActionPrimitive::Translation { .. }));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_program("scale(object, factor=1.2)").is_ok());
        assert!(parse_program("translate(object, 0.1, 0, -0.2)").is_ok());
        assert!(parse_program("move_camera(path=orbit)").is_ok());
    }

    #[test]
    fn negative_factor_rejected() {
        let err = parse_program("scale(object, factor=-1)").unwrap_err();
        assert!(matches!(err, DslError::NonPositiveFactor { .. }));
        assert!(err.to_string().contains("factor must be positive"));
    }

    #[test]
    fn errors_carry_positions() {
        match parse_program("rotate(obj,\n  yaw=)") {
            Err(DslError::Syntax { line, column, .. }) => assert_eq!((line, column), (2, 7)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_program("spin(obj)"),
            Err(DslError::UnknownPrimitive { .. })
        ));
        assert!(matches!(
            parse_program("rotate(obj, yaw=ninety)"),
            Err(DslError::NonNumeric { .. })
        ));
        assert!(matches!(
            parse_program("compose([])"),
            Err(DslError::EmptyComposition { .. })
        ));
        assert!(parse_program("rotate(obj) extra").is_err());
        assert!(parse_program("rotate(obj, yaw=1, yaw=2)").is_err());
    }

    #[test]
    fn canonical_print() {
        let p = parse_program("ROTATE( obj ,yaw = 90 )").unwrap();
        assert_eq!(print_program(&p), "rotate(obj, yaw=90)");
        let p = parse_program("translate(dz=0.5, object=box)").unwrap();
        assert_eq!(print_program(&p), "translate(box, dx=0, dy=0, dz=0.5)");
        let p = parse_program("compose([rotate(a, yaw=45), scale(a, factor=2)])").unwrap();
        assert_eq!(
            print_program(&p),
            "compose([rotate(a, yaw=45), scale(a, factor=2)])"
        );
        let p = parse_program("move_camera(path=[[0,0,1],[1, 0.5, 1]])").unwrap();
        assert_eq!(print_program(&p), "move_camera(path=[[0, 0, 1], [1, 0.5, 1]])");
    }

    #[test]
    fn yaw_normalized() {
        let p = parse_program("rotate(o, yaw=-90)").unwrap();
        assert_eq!(print_program(&p), "rotate(o, yaw=270)");
        let p = parse_program("rotate(o, yaw=450)").unwrap();
        assert_eq!(print_program(&p), "rotate(o, yaw=90)");
    }

    #[test]
    fn depth_cap() {
        let ok = "compose([compose([compose([compose([rotate])])])])";
        assert_eq!(parse_program(ok).unwrap().root.compose_depth(), 4);
        let deep = "compose([compose([compose([compose([compose([rotate])])])])])";
        assert!(matches!(
            parse_program(deep),
            Err(DslError::TooDeep { .. })
        ));
    }

    #[test]
    fn dense_and_endpoint_sampling() {
        let p = parse_program("rotate(object, yaw=90)").unwrap();
        let dense = sample_states(&p, SamplingMode::VideoDense { step_deg: 15.0 }, true).unwrap();
        assert_eq!(yaws(&dense), vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0]);
        assert!(!dense.last().unwrap().clamped);
        let ends = sample_states(&p, SamplingMode::ImageEndpoints, true).unwrap();
        assert_eq!(yaws(&ends), vec![0.0, 90.0]);
        let one_step = sample_states(&p, SamplingMode::VideoDense { step_deg: 90.0 }, true).unwrap();
        assert_eq!(one_step.len(), 2);
    }

    #[test]
    fn remainder_is_clamped() {
        let p = parse_program("rotate(object, yaw=90)").unwrap();
        let s = sample_states(&p, SamplingMode::VideoDense { step_deg: 40.0 }, true).unwrap();
        assert_eq!(yaws(&s), vec![0.0, 40.0, 80.0, 90.0]);
        assert!(s.last().unwrap().clamped);
    }

    #[test]
    fn sampling_errors() {
        let p = parse_program("rotate(object, yaw=90)").unwrap();
        assert!(matches!(
            sample_states(&p, SamplingMode::VideoDense { step_deg: 0.0 }, false),
            Err(SamplingError::NonPositiveStep(_))
        ));
        assert!(matches!(
            sample_states(&p, SamplingMode::VideoDense { step_deg: -5.0 }, false),
            Err(SamplingError::NonPositiveStep(_))
        ));
        let cam = parse_program("move_camera(path=orbit)").unwrap();
        assert_eq!(
            sample_states(&cam, SamplingMode::ImageEndpoints, true),
            Err(SamplingError::CameraLocked)
        );
        assert_eq!(
            sample_states(&cam, SamplingMode::ImageEndpoints, false)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn validation() {
        let manifest = SceneManifest::rotation_task(["object", "mug"]);
        let p = parse_program("rotate(mug, yaw=90)").unwrap();
        assert_eq!(validate_program(&p, &manifest), Ok(()));
        let ghost = parse_program("rotate(ghost, yaw=90)").unwrap();
        let v = validate_program(&ghost, &manifest).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "unknown object ghost");
        let cam = parse_program("compose([rotate(mug, yaw=90), move_camera(path=orbit)])").unwrap();
        let v = validate_program(&cam, &manifest).unwrap_err();
        assert_eq!(v[0].to_string(), "task-locked parameter: camera");
        let big = parse_program("scale(mug, factor=10)").unwrap();
        assert!(matches!(
            validate_program(&big, &manifest).unwrap_err()[0],
            Violation::OutOfRange { .. }
        ));
    }
}
