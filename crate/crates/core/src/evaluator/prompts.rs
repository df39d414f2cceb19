//! Built-in prompt presets. `{QUESTION}` is replaced with the query text.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const QUESTION_PLACEHOLDER: &str = "{QUESTION}";

const STRUCTURED_SYSTEM: &str = "Your task is to follow a systematic, thorough reasoning process before providing the final solution. This involves analyzing, summarizing, exploring, reassessing, and refining your thought process through multiple iterations. Structure your response into two sections: Thought and Solution. In the Thought section, present your reasoning using the format: \u{201c}<think>\\n {thoughts} </think>\\n\u{201d}. Each thought should include detailed analysis, brainstorming, verification, and refinement of ideas. After \u{201c}</think>\\n\u{201d} in the Solution section, provide the final, logical, and accurate answer, clearly derived from the exploration in the Thought section. If applicable, include the answer in \\boxed{} for closed-form results like multiple choices or mathematical solutions.";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptPreset {
    /// Structured think/solution prompt.
    #[default]
    QwenStructured,
    /// Plain step-by-step prompt for backbones unstable under long system text.
    LlamaCot,
    /// Structured prompt followed by the step-by-step prefix.
    LlamaHybrid,
}

impl PromptPreset {
    pub const ALL: [PromptPreset; 3] = [Self::QwenStructured, Self::LlamaCot, Self::LlamaHybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::QwenStructured => "qwen-structured",
            Self::LlamaCot => "llama-cot",
            Self::LlamaHybrid => "llama-hybrid",
        }
    }

    pub fn template(self) -> String {
        let structured =
            format!("{STRUCTURED_SYSTEM}\nUser: This is the problem: {QUESTION_PLACEHOLDER}\nAssistant: <think>");
        match self {
            Self::QwenStructured => structured,
            Self::LlamaCot => {
                format!("User: {QUESTION_PLACEHOLDER}\nAnswer: Let's think step by step.")
            }
            Self::LlamaHybrid => format!("{structured}\nAnswer: Let's think step by step."),
        }
    }

    pub fn render(self, question: &str) -> String {
        render_template(&self.template(), question)
    }
}

pub fn render_template(template: &str, question: &str) -> String {
    template.replace(QUESTION_PLACEHOLDER, question)
}

impl fmt::Display for PromptPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown prompt preset {s:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_render_question_once() {
        for preset in PromptPreset::ALL {
            let text = preset.render("What is 2+2?");
            assert_eq!(text.matches("What is 2+2?").count(), 1, "{preset}");
            assert!(!text.contains(QUESTION_PLACEHOLDER));
            assert_eq!(preset.as_str().parse::<PromptPreset>().unwrap(), preset);
        }
    }

    #[test]
    fn preset_shapes() {
        let q = PromptPreset::QwenStructured.render("Q");
        assert!(q.ends_with("User: This is the problem: Q\nAssistant: <think>"));
        assert!(q.contains("\\boxed{}"));
        assert_eq!(
            PromptPreset::LlamaCot.render("Q"),
            "User: Q\nAnswer: Let's think step by step."
        );
        let h = PromptPreset::LlamaHybrid.render("Q");
        assert!(h.starts_with(&q));
        assert!(h.ends_with("<think>\nAnswer: Let's think step by step."));
        assert!("mystery".parse::<PromptPreset>().is_err());
    }
}
