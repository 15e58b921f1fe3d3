//! Harness variants, workspace-aware tool routing and prompt assembly.
//!
//! The routed harness (`MM`) scans the initial workspace once per trial and
//! keeps only the perception tools whose modality is present. Every other
//! variant carries a fixed perception set.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

pub const DEFAULT_SCAN_DEPTH: usize = 6;

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("workspace not found: {0}")]
    WorkspaceNotFound(PathBuf),
    #[error("unknown harness variant `{0}`")]
    UnknownVariant(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Audio, Modality::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    /// Maps a file extension (without the dot, any case) to its modality.
    pub fn from_extension(ext: &str) -> Option<Modality> {
        match ext.to_ascii_lowercase().as_str() {
            "wav" | "mp3" | "ogg" | "flac" | "aac" | "m4a" => Some(Modality::Audio),
            "mp4" | "webm" | "avi" | "mov" | "mkv" => Some(Modality::Video),
            "png" | "jpg" | "jpeg" | "gif" | "webp" => Some(Modality::Image),
            _ => None,
        }
    }

    pub fn perception_tool(self) -> ToolName {
        match self {
            Modality::Image => ToolName::ViewImage,
            Modality::Audio => ToolName::ListenAudio,
            Modality::Video => ToolName::WatchVideo,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    ExecuteCommands,
    TaskComplete,
    ViewImage,
    ListenAudio,
    WatchVideo,
}

impl ToolName {
    pub const ALL: [ToolName; 5] = [
        ToolName::ExecuteCommands,
        ToolName::TaskComplete,
        ToolName::ViewImage,
        ToolName::ListenAudio,
        ToolName::WatchVideo,
    ];
    pub const PERCEPTION: [ToolName; 3] = [
        ToolName::ViewImage,
        ToolName::ListenAudio,
        ToolName::WatchVideo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::ExecuteCommands => "execute_commands",
            ToolName::TaskComplete => "task_complete",
            ToolName::ViewImage => "view_image",
            ToolName::ListenAudio => "listen_audio",
            ToolName::WatchVideo => "watch_video",
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            ToolName::ViewImage => Some(Modality::Image),
            ToolName::ListenAudio => Some(Modality::Audio),
            ToolName::WatchVideo => Some(Modality::Video),
            _ => None,
        }
    }

    pub fn is_perception(self) -> bool {
        self.modality().is_some()
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolName {
    type Err = RoutingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| RoutingError::UnknownTool(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HarnessVariant {
    T2,
    KIRA,
    A,
    V,
    IA,
    IV,
    AV,
    #[serde(rename = "MM_unmasked")]
    MmUnmasked,
    MM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    Static,
    Dynamic,
}

impl HarnessVariant {
    pub const ALL: [HarnessVariant; 9] = [
        HarnessVariant::T2,
        HarnessVariant::KIRA,
        HarnessVariant::A,
        HarnessVariant::V,
        HarnessVariant::IA,
        HarnessVariant::IV,
        HarnessVariant::AV,
        HarnessVariant::MmUnmasked,
        HarnessVariant::MM,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HarnessVariant::T2 => "T2",
            HarnessVariant::KIRA => "KIRA",
            HarnessVariant::A => "A",
            HarnessVariant::V => "V",
            HarnessVariant::IA => "IA",
            HarnessVariant::IV => "IV",
            HarnessVariant::AV => "AV",
            HarnessVariant::MmUnmasked => "MM_unmasked",
            HarnessVariant::MM => "MM",
        }
    }

    pub fn routing(self) -> Routing {
        match self {
            HarnessVariant::MM => Routing::Dynamic,
            _ => Routing::Static,
        }
    }

    /// Perception tools the variant may ever expose. For `MM` this is the
    /// upper bound; the routed subset is decided per workspace.
    pub fn native_tools(self) -> BTreeSet<ToolName> {
        use ToolName::*;
        let tools: &[ToolName] = match self {
            HarnessVariant::T2 => &[],
            HarnessVariant::KIRA => &[ViewImage],
            HarnessVariant::A => &[ListenAudio],
            HarnessVariant::V => &[WatchVideo],
            HarnessVariant::IA => &[ViewImage, ListenAudio],
            HarnessVariant::IV => &[ViewImage, WatchVideo],
            HarnessVariant::AV => &[ListenAudio, WatchVideo],
            HarnessVariant::MmUnmasked | HarnessVariant::MM => {
                &[ViewImage, ListenAudio, WatchVideo]
            }
        };
        tools.iter().copied().collect()
    }

    /// Modalities the harness can perceive natively.
    pub fn native_modalities(self) -> BTreeSet<Modality> {
        self.native_tools()
            .into_iter()
            .filter_map(ToolName::modality)
            .collect()
    }
}

impl fmt::Display for HarnessVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HarnessVariant {
    type Err = RoutingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s
            .trim()
            .to_ascii_lowercase()
            .replace(['-', ' '], "_")
            .trim_start_matches("terminus_")
            .to_string();
        let v = match key.as_str() {
            "t2" | "2" => HarnessVariant::T2,
            "kira" => HarnessVariant::KIRA,
            "a" => HarnessVariant::A,
            "v" => HarnessVariant::V,
            "ia" => HarnessVariant::IA,
            "iv" => HarnessVariant::IV,
            "av" => HarnessVariant::AV,
            "mm_unmasked" | "mm_w/o_modality_masking" => HarnessVariant::MmUnmasked,
            "mm" => HarnessVariant::MM,
            _ => return Err(RoutingError::UnknownVariant(s.to_string())),
        };
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDescriptor {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub description: String,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDefinition {
    pub name: ToolName,
    pub description: String,
    pub parameters: Vec<ParamDescriptor>,
}

fn param(name: &str, kind: &str, description: &str, required: bool) -> ParamDescriptor {
    ParamDescriptor {
        name: name.to_string(),
        kind: kind.to_string(),
        description: description.to_string(),
        required,
    }
}

impl ToolDefinition {
    pub fn canonical(name: ToolName) -> ToolDefinition {
        let (description, parameters) = match name {
            ToolName::ExecuteCommands => (
                "Run a shell command in the task terminal. The working directory is the \
                 workspace root. Returns stdout, stderr and the exit code; long output is \
                 truncated.",
                vec![
                    param("command", "string", "Shell command line to run.", true),
                    param(
                        "timeout_seconds",
                        "number",
                        "Optional per-command timeout; capped by the remaining budget.",
                        false,
                    ),
                ],
            ),
            ToolName::TaskComplete => (
                "Declare the task finished. Call it only after every required output file \
                 has been written. Takes no arguments.",
                vec![],
            ),
            ToolName::ViewImage => (
                "Load an image file from the workspace and attach it to your next \
                 observation so you can inspect it directly.",
                vec![param(
                    "path",
                    "string",
                    "Workspace-relative image path.",
                    true,
                )],
            ),
            ToolName::ListenAudio => (
                "Load an audio file from the workspace and attach it to your next \
                 observation so you can listen to it directly. Clip long recordings with \
                 terminal tools first.",
                vec![param(
                    "path",
                    "string",
                    "Workspace-relative audio path.",
                    true,
                )],
            ),
            ToolName::WatchVideo => (
                "Load a video file from the workspace and attach it to your next \
                 observation so you can watch it directly, including its audio track. Clip \
                 long videos with terminal tools first.",
                vec![param(
                    "path",
                    "string",
                    "Workspace-relative video path.",
                    true,
                )],
            ),
        };
        ToolDefinition {
            name,
            description: description.to_string(),
            parameters,
        }
    }

    /// Function-calling JSON schema in the OpenAI-compatible shape.
    pub fn to_json_schema(&self) -> serde_json::Value {
        let mut properties = serde_json::Map::new();
        let mut required = Vec::new();
        for p in &self.parameters {
            properties.insert(
                p.name.clone(),
                serde_json::json!({ "type": p.kind, "description": p.description }),
            );
            if p.required {
                required.push(p.name.clone());
            }
        }
        serde_json::json!({
            "type": "function",
            "function": {
                "name": self.name.as_str(),
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": required,
                }
            }
        })
    }
}

/// Tools exposed to the model for one trial, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub tools: Vec<ToolDefinition>,
}

impl ToolSchema {
    pub fn from_names(names: &BTreeSet<ToolName>) -> ToolSchema {
        ToolSchema {
            tools: names
                .iter()
                .map(|&n| ToolDefinition::canonical(n))
                .collect(),
        }
    }

    pub fn names(&self) -> BTreeSet<ToolName> {
        self.tools.iter().map(|t| t.name).collect()
    }

    pub fn contains(&self, name: ToolName) -> bool {
        self.tools.iter().any(|t| t.name == name)
    }
}

/// Collects the modalities of every regular file within `max_depth` of the
/// workspace root. Direct children are depth 1; symlinks are skipped.
pub fn scan_modalities(
    workspace: &Path,
    max_depth: usize,
) -> Result<BTreeSet<Modality>, RoutingError> {
    if !workspace.is_dir() {
        return Err(RoutingError::WorkspaceNotFound(workspace.to_path_buf()));
    }
    let mut found = BTreeSet::new();
    let walker = WalkDir::new(workspace)
        .follow_links(false)
        .min_depth(1)
        .max_depth(max_depth.max(1));
    for entry in walker.into_iter().filter_map(Result::ok) {
        if !entry.file_type().is_file() {
            continue;
        }
        if let Some(m) = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .and_then(Modality::from_extension)
        {
            found.insert(m);
            if found.len() == Modality::ALL.len() {
                break;
            }
        }
    }
    Ok(found)
}

pub fn route_tools(modalities: &BTreeSet<Modality>) -> BTreeSet<ToolName> {
    let mut keep = BTreeSet::from([ToolName::ExecuteCommands, ToolName::TaskComplete]);
    if !modalities.is_empty() {
        keep.insert(ToolName::ViewImage);
    }
    if modalities.contains(&Modality::Audio) {
        keep.insert(ToolName::ListenAudio);
    }
    if modalities.contains(&Modality::Video) {
        keep.insert(ToolName::WatchVideo);
    }
    keep
}

/// The schema a trial runs with. Called once, before the first model call.
pub fn effective_schema(
    variant: HarnessVariant,
    workspace: &Path,
) -> Result<ToolSchema, RoutingError> {
    let names = match variant.routing() {
        Routing::Dynamic => route_tools(&scan_modalities(workspace, DEFAULT_SCAN_DEPTH)?),
        Routing::Static => {
            let mut names = variant.native_tools();
            names.insert(ToolName::ExecuteCommands);
            names.insert(ToolName::TaskComplete);
            names
        }
    };
    Ok(ToolSchema::from_names(&names))
}

const CANONICAL_PREAMBLE: &str = "You are an AI assistant solving a task inside a Linux \
terminal. The workspace may contain image, audio, and video files. You act by calling \
the tools described below; shell commands run in the workspace root, and perception \
tools attach media from the workspace to your next observation.";

const TERMINAL_PREAMBLE: &str = "You are an AI assistant solving a task inside a Linux \
terminal. You act by issuing shell commands through the tools described below and \
reading their output.";

const KIRA_PREAMBLE: &str = "# Role\nYou operate a Linux terminal to complete the task \
below. You may inspect image files directly as well as run shell commands.";

const CONSTRAINTS: &str = "Constraints:\n\
- Work autonomously. There is no human in the loop to answer questions.\n\
- Make only the state changes the task requires.\n\
- Write every required output before calling task_complete.";

fn tool_block(def: &ToolDefinition) -> String {
    let mut s = format!("### {}\n{}\n", def.name, def.description);
    if def.parameters.is_empty() {
        s.push_str("Parameters: none\n");
    } else {
        s.push_str("Parameters:\n");
        for p in &def.parameters {
            let req = if p.required { "required" } else { "optional" };
            s.push_str(&format!(
                "- {} ({}, {}): {}\n",
                p.name, p.kind, req, p.description
            ));
        }
    }
    s
}

/// Assembles the runtime prompt.
///
/// `MM` and `MM_unmasked` deploy the full canonical prompt with all five tool
/// blocks regardless of the routed schema. Reduced MM-family variants (A, V,
/// IA, IV, AV) list only their schema's blocks plus one `You CANNOT call`
/// line per dropped perception tool. `T2` and `KIRA` use their own templates.
pub fn build_prompt(
    variant: HarnessVariant,
    schema: &ToolSchema,
    instruction: &str,
    terminal_state: &str,
) -> String {
    let (preamble, blocks, disclaimers): (&str, Vec<ToolDefinition>, Vec<ToolName>) = match variant
    {
        HarnessVariant::MM | HarnessVariant::MmUnmasked => (
            CANONICAL_PREAMBLE,
            ToolName::ALL
                .iter()
                .map(|&n| ToolDefinition::canonical(n))
                .collect(),
            vec![],
        ),
        HarnessVariant::T2 => (TERMINAL_PREAMBLE, schema.tools.clone(), vec![]),
        HarnessVariant::KIRA => (KIRA_PREAMBLE, schema.tools.clone(), vec![]),
        _ => {
            let present = schema.names();
            let dropped = ToolName::PERCEPTION
                .into_iter()
                .filter(|t| !present.contains(t))
                .collect();
            (CANONICAL_PREAMBLE, schema.tools.clone(), dropped)
        }
    };

    let mut out = String::new();
    out.push_str(preamble);
    out.push_str("\n\n## Tools\n\n");
    for def in &blocks {
        out.push_str(&tool_block(def));
        out.push('\n');
    }
    for tool in disclaimers {
        out.push_str(&format!("You CANNOT call {tool}.\n"));
    }
    if !out.ends_with("\n\n") {
        out.push('\n');
    }
    out.push_str(CONSTRAINTS);
    out.push_str("\n\n## Task\n");
    out.push_str(instruction);
    out.push_str("\n\n## Current terminal state\n");
    out.push_str(terminal_state);
    out.push('\n');
    out
}
