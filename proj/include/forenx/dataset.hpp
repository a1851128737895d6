#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "forenx/model.hpp"
#include "forenx/resources.hpp"

namespace forenx {

inline constexpr int kSchemaVersion = 1;

/// A schema violation; `field` is the dotted path of the offending field.
class SchemaError : public ValidationError {
public:
    SchemaError(std::string field, const std::string& message)
        : ValidationError(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

enum class Label { Real = 0, Fake = 1 };
const char* to_string(Label l);
Label parse_label(const std::string& s);
inline int label_value(Label l) { return static_cast<int>(l); }

/// Declared generator-source tags, in report order.
const std::vector<std::string>& source_registry();
bool is_registered_source(std::string_view tag);
std::size_t source_rank(std::string_view tag);

struct ImageSample {
    std::string id;
    std::string image;  // path, relative to the dataset file's directory
    Label label = Label::Real;
    std::string source;
    std::string split = "train";

    bool operator==(const ImageSample&) const = default;
};

struct Turn {
    std::string role;  // "user" | "assistant"
    std::string kind;  // "content" | "detection" | "reason"
    std::string text;

    bool operator==(const Turn&) const = default;
};

struct ConversationRecord {
    ImageSample sample;
    std::vector<Turn> turns;

    bool has_reason() const;
    bool operator==(const ConversationRecord&) const = default;
};

struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    std::string reason;

    bool operator==(const Box&) const = default;
};

struct BoxAnnotation {
    std::string image_id;
    std::string annotator;
    std::string timestamp;
    std::vector<Box> boxes;

    bool operator==(const BoxAnnotation&) const = default;
};

// ---- Conversation generation ---------------------------------------------------

struct QAPair {
    std::string question;
    std::string answer;
};

/// Exact prompt text for the version plus the canonical Yes/No answer.
QAPair gen_detection_qa(Label label, std::string_view prompt_version);

const resources::DetectionPrompt& detection_prompt(std::string_view version);

class Captioner {
public:
    virtual ~Captioner() = default;
    virtual std::string caption(const Image& image) = 0;
};

/// Deterministic caption from brightness and dominant tone; the template is picked by image hash.
class MockCaptioner : public Captioner {
public:
    std::string caption(const Image& image) override;
};

/// Question drawn with `rng` from the predefined brief-description list.
QAPair gen_content_qa(const Image& image, Captioner& captioner, std::mt19937_64& rng);

// ---- Spatial text ------------------------------------------------------------------

/// Pixel-space box to [0, 1] coordinates.
Box normalize_box(double px0, double py0, double px1, double py1, double width, double height,
                  std::string reason = {});

/// 3x3 grid phrase chosen by the box centre; a box spanning more than 60% of an axis is
/// reported as "across the ... row/column" ("across the whole image" when both).
std::string box_to_spatial_text(const Box& box);

// ---- Summaries ------------------------------------------------------------------------

struct EvidencePair {
    std::string location;
    std::string reason;
};

class Summarizer {
public:
    virtual ~Summarizer() = default;
    virtual std::string summarize(const std::string& image_id, std::span<const EvidencePair> pairs) = 0;
};

/// Fixed preamble followed by "In the {location}, {reason}." per pair, in input order.
class MockSummarizer : public Summarizer {
public:
    std::string summarize(const std::string& image_id, std::span<const EvidencePair> pairs) override;
};

std::vector<EvidencePair> evidence_from(const BoxAnnotation& annotation);

std::string summarize_annotations(const std::string& image_id, std::span<const EvidencePair> pairs,
                                  Summarizer& client);

// ---- Records ----------------------------------------------------------------------------

/// Content round, detection round and, when a summary is given, a reason round.
ConversationRecord make_record(const ImageSample& sample, const Image& image, Captioner& captioner,
                               std::string_view prompt_version, std::mt19937_64& rng,
                               const std::optional<std::string>& reason = std::nullopt);

struct ForgReasonCounts {
    std::size_t annotated = 2215;
    std::size_t real = 5000;
    std::size_t fake = 1000;
    std::size_t total() const { return annotated + real + fake; }
};

/// Annotated fakes first (input order), then seeded samples from the real and fake pools.
std::vector<ConversationRecord> assemble_forgreason(std::span<const ConversationRecord> annotated,
                                                    std::span<const ConversationRecord> real_pool,
                                                    std::span<const ConversationRecord> fake_pool,
                                                    const ForgReasonCounts& counts, std::uint64_t seed);

/// Lowercased letter runs minus stopwords; count descending, ties alphabetical.
std::vector<std::pair<std::string, std::size_t>> word_frequency(std::span<const std::string> texts,
                                                                std::span<const std::string_view> stopwords);
std::vector<std::pair<std::string, std::size_t>> word_frequency(std::span<const std::string> texts);

// ---- Synthetic corpus ------------------------------------------------------------------------

enum class ArtifactKind { A, B };
ArtifactKind parse_artifact_kind(const std::string& s);
const char* to_string(ArtifactKind k);
std::string synthetic_source(ArtifactKind k);

struct SyntheticImage {
    ImageSample sample;
    Image image;
};

/// n/2 textured real images and n/2 fakes carrying the kind's artifact (A: additive
/// checkerboard, B: shifted channel correlation). Pixels are multiples of 1/255.
std::vector<SyntheticImage> gen_synthetic_dataset(std::uint64_t seed, std::size_t n, ArtifactKind kind,
                                                  const std::string& split, std::size_t size = 32);

// ---- File formats ---------------------------------------------------------------------------

/// Binary PPM (P6), 8 bits per channel.
void write_ppm(const std::filesystem::path& file, const Image& image);
Image read_ppm(const std::filesystem::path& file);
std::string encode_ppm(const Image& image);
/// PNG encoding used when an image has to be sent to a remote model.
std::string encode_png(const Image& image);

nlohmann::ordered_json to_json(const ConversationRecord& r);
ConversationRecord record_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json to_json(const BoxAnnotation& a);
/// Validates fields and box geometry; throws SchemaError naming the field path.
BoxAnnotation annotation_from_json(const nlohmann::ordered_json& j);

std::string dataset_to_jsonl(std::span<const ConversationRecord> records);
void write_dataset(const std::filesystem::path& file, std::span<const ConversationRecord> records);
/// Errors carry "file:line: field: message".
std::vector<ConversationRecord> read_dataset(const std::filesystem::path& file);
std::vector<ConversationRecord> parse_dataset(std::string_view text, const std::string& name = "<dataset>");

std::string annotations_to_jsonl(std::span<const BoxAnnotation> annotations);
void write_annotations(const std::filesystem::path& file, std::span<const BoxAnnotation> annotations);
std::vector<BoxAnnotation> read_annotations(const std::filesystem::path& file);
std::vector<BoxAnnotation> parse_annotations(std::string_view text, const std::string& name = "<annotations>");

/// Image sample manifest for real-data builds: one {"id","image","label","source","split"} per line.
std::vector<ImageSample> read_manifest(const std::filesystem::path& file);

/// Turns every user/assistant round of every record into a training example.
struct LoadedDataset {
    std::vector<ConversationRecord> records;
    std::vector<std::unique_ptr<Image>> images;  // parallel to records
};
LoadedDataset load_dataset_with_images(const std::filesystem::path& file);

std::vector<Example> training_examples(const LoadedDataset& data, std::string_view system_prompt);

}  // namespace forenx
