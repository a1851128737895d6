#pragma once

// Versioned text resources shared by the dataset builder, the tokenizer and the
// evaluation bench. Prompt texts are kept verbatim, spelling included.

#include <array>
#include <string_view>

namespace forenx::resources {

inline constexpr std::string_view kResourceVersion = "resources-v1";

inline constexpr std::string_view kDefaultSystemPrompt =
    "A chat between a curious human and an artificial intelligence assistant. The assistant "
    "gives helpful, detailed, and polite answers to the human's questions.";

inline constexpr std::string_view kExpertSystemPrompt =
    "You are an image authentication expert who can identify images as artificially generated "
    "by artificial intelligence based on the content and details of the images, and describe it "
    "in natural language.";

struct DetectionPrompt {
    std::string_view version;
    std::string_view system;
    std::string_view user;
};

inline constexpr std::array<DetectionPrompt, 5> kDetectionPrompts{{
    {"v1", kDefaultSystemPrompt,
     "Summarize whether this image is Generated by Artificial Intelligence, please return begin "
     "with yes or no."},
    {"v2", kDefaultSystemPrompt,
     "Summarize whether this image is AI-generated images, please return begin with yes or no."},
    {"v3", kDefaultSystemPrompt,
     "Tell me if there are synthesis artifacts in the image. Please return begin with yes or no."},
    {"v4", kDefaultSystemPrompt,
     "I want you to work as an image forensic expert for AI-generated image. Check if the image "
     "has the artifact. Please return begin with yes or no."},
    {"v5", kExpertSystemPrompt,
     "Summarize whether this image is Generated by Artificial Intelligence, please return begin "
     "with yes or no."},
}};

inline constexpr std::string_view kFakeAnswer = "Yes, this image is typically generated by AI.";
inline constexpr std::string_view kRealAnswer = "No, this image is not generated by AI.";

/// Brief-description questions from the visual instruction-tuning convention.
inline constexpr std::string_view kContentQuestionsVersion = "content-questions-v1";
inline constexpr std::array<std::string_view, 11> kContentQuestions{{
    "Describe the image concisely.",
    "Provide a brief description of the given image.",
    "Offer a succinct explanation of the picture presented.",
    "Summarize the visual content of the image.",
    "Give a short and clear explanation of the subsequent image.",
    "Share a concise interpretation of the image provided.",
    "Present a compact description of the photo's key features.",
    "Relay a brief, clear account of the picture shown.",
    "Render a clear and concise summary of the photo.",
    "Write a terse but informative summary of the picture.",
    "Create a compact narrative representing the image presented.",
}};

inline constexpr std::string_view kReasonQuestion =
    "Explain why this image is considered to be generated by AI.";

inline constexpr std::string_view kSummaryPreamble =
    "This image is considered to be generated by AI because of the following evidence.";

/// Role tags wrapped around the user turn when sequences are assembled.
inline constexpr std::string_view kUserTag = "USER:";
inline constexpr std::string_view kAssistantTag = "ASSISTANT:";

// Mock captioner vocabulary.
inline constexpr std::array<std::string_view, 4> kBrightnessWords{{"dark", "dim", "bright", "pale"}};
inline constexpr std::array<std::string_view, 4> kToneWords{{"red", "green", "blue", "neutral"}};
inline constexpr std::array<std::string_view, 3> kCaptionTemplates{{
    "A {b} scene dominated by {t} tones.",
    "The picture shows a {b} texture with {t} colors.",
    "This is a {b} photo with mostly {t} tones.",
}};

/// Words frequently used in forgery reasons; seeded into the tokenizer vocabulary.
inline constexpr std::array<std::string_view, 48> kForgeryVocabulary{{
    "hand", "hands", "finger", "fingers", "skin", "teeth", "hair", "face", "eyes", "eye",
    "background", "shadow", "shadows", "lighting", "light", "text", "letters", "reflection",
    "unrealistic", "distorted", "unreasonable", "unnatural", "twisted", "unreal", "oversmoothed",
    "impossible", "unreadable", "blurry", "missing", "extra", "six", "merged", "floating",
    "inconsistent", "strange", "structure", "object", "objects", "edge", "edges", "texture",
    "smooth", "too", "has", "are", "looks", "no", "support",
}};

inline constexpr std::array<std::string_view, 14> kSpatialWords{{
    "top", "middle", "bottom", "left", "center", "right", "across", "the", "row", "column",
    "whole", "image", "In", "in",
}};

/// English stopwords removed before word counting and judge scoring.
inline constexpr std::array<std::string_view, 126> kStopwords{{
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "also",
}};

template <std::size_t N>
constexpr bool all_nonempty(const std::array<std::string_view, N>& a) {
    for (auto s : a) {
        if (s.empty()) return false;
    }
    return true;
}
static_assert(all_nonempty(kContentQuestions));
static_assert(all_nonempty(kForgeryVocabulary));
static_assert(all_nonempty(kSpatialWords));
static_assert(all_nonempty(kStopwords));

}  // namespace forenx::resources
