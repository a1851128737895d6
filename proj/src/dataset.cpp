#include "forenx/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "forenx/checkpoint.hpp"
#include "forenx/hash.hpp"

namespace forenx {

using OJson = nlohmann::ordered_json;

// ---- Labels and sources ---------------------------------------------------------

const char* to_string(Label l) { return l == Label::Fake ? "fake" : "real"; }

Label parse_label(const std::string& s) {
    if (s == "fake") return Label::Fake;
    if (s == "real") return Label::Real;
    throw ValidationError("label must be 'real' or 'fake', got '" + s + "'");
}

const std::vector<std::string>& source_registry() {
    static const std::vector<std::string> kSources{
        "synthetic-A", "synthetic-B",
        // diffusion benchmark subsets
        "Midjourney", "SDv1.4", "SDv1.5", "ADM", "GLIDE", "Wukong", "VQDM", "BigGAN",
        // GAN benchmark subsets
        "ProGAN", "StyleGAN", "StyleGAN2", "CycleGAN", "StarGAN", "GauGAN", "Deepfake",
        "Flux",
    };
    return kSources;
}

bool is_registered_source(std::string_view tag) {
    const auto& r = source_registry();
    return std::find(r.begin(), r.end(), tag) != r.end();
}

std::size_t source_rank(std::string_view tag) {
    const auto& r = source_registry();
    auto it = std::find(r.begin(), r.end(), tag);
    if (it == r.end()) throw ValidationError("unknown source tag '" + std::string(tag) + "'");
    return static_cast<std::size_t>(it - r.begin());
}

bool ConversationRecord::has_reason() const {
    return std::any_of(turns.begin(), turns.end(), [](const Turn& t) { return t.kind == "reason"; });
}

// ---- Conversation generation -----------------------------------------------------

const resources::DetectionPrompt& detection_prompt(std::string_view version) {
    for (const auto& p : resources::kDetectionPrompts) {
        if (p.version == version) return p;
    }
    throw ValidationError("unknown prompt version '" + std::string(version) + "' (expected v1..v5)");
}

QAPair gen_detection_qa(Label label, std::string_view prompt_version) {
    const auto& p = detection_prompt(prompt_version);
    return {std::string(p.user),
            std::string(label == Label::Fake ? resources::kFakeAnswer : resources::kRealAnswer)};
}

namespace {

std::string image_digest(const Image& image) {
    Sha256 h;
    h.update(std::to_string(image.channels) + "x" + std::to_string(image.height) + "x" +
             std::to_string(image.width));
    h.update(std::span<const double>(image.pixels));
    return h.hex_digest();
}

}  // namespace

std::string MockCaptioner::caption(const Image& image) {
    const std::size_t hw = image.height * image.width;
    if (hw == 0) throw ValidationError("cannot caption an empty image");
    std::vector<double> means(image.channels, 0.0);
    for (std::size_t c = 0; c < image.channels; ++c) {
        for (std::size_t i = 0; i < hw; ++i) means[c] += image.pixels[c * hw + i];
        means[c] /= static_cast<double>(hw);
    }
    const double brightness = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
    const std::size_t b = std::min<std::size_t>(3, static_cast<std::size_t>(brightness * 4.0));
    std::size_t tone = 3;
    if (image.channels == 3) {
        const auto mx = std::max_element(means.begin(), means.end());
        std::vector<double> sorted = means;
        std::sort(sorted.rbegin(), sorted.rend());
        if (sorted[0] - sorted[1] > 0.05) tone = static_cast<std::size_t>(mx - means.begin());
    }
    const std::string digest = image_digest(image);
    const std::size_t t = std::stoul(digest.substr(0, 8), nullptr, 16) % resources::kCaptionTemplates.size();
    std::string out(resources::kCaptionTemplates[t]);
    auto replace = [&](std::string_view key, std::string_view value) {
        const auto pos = out.find(key);
        if (pos != std::string::npos) out.replace(pos, key.size(), value);
    };
    replace("{b}", resources::kBrightnessWords[b]);
    replace("{t}", resources::kToneWords[tone]);
    return out;
}

QAPair gen_content_qa(const Image& image, Captioner& captioner, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, resources::kContentQuestions.size() - 1);
    QAPair qa;
    qa.question = std::string(resources::kContentQuestions[pick(rng)]);
    qa.answer = captioner.caption(image);
    return qa;
}

// ---- Spatial text ------------------------------------------------------------------

Box normalize_box(double px0, double py0, double px1, double py1, double width, double height,
                  std::string reason) {
    if (!(width > 0.0) || !(height > 0.0)) throw ValidationError("image dimensions must be positive");
    Box b;
    b.x0 = px0 / width;
    b.y0 = py0 / height;
    b.x1 = px1 / width;
    b.y1 = py1 / height;
    b.reason = std::move(reason);
    return b;
}

namespace {

std::size_t grid_cell(double centre) {
    return std::min<std::size_t>(2, static_cast<std::size_t>(std::max(0.0, centre) * 3.0));
}

}  // namespace

std::string box_to_spatial_text(const Box& box) {
    for (double v : {box.x0, box.y0, box.x1, box.y1}) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw ValidationError("box coordinates must be normalized to [0, 1]");
        }
    }
    if (!(box.x1 > box.x0) || !(box.y1 > box.y0)) throw ValidationError("degenerate box (zero area)");
    static const char* kRows[] = {"top", "middle", "bottom"};
    static const char* kCols[] = {"left", "center", "right"};
    const std::size_t row = grid_cell((box.y0 + box.y1) / 2.0);
    const std::size_t col = grid_cell((box.x0 + box.x1) / 2.0);
    const bool wide = box.x1 - box.x0 > 0.6;
    const bool tall = box.y1 - box.y0 > 0.6;
    if (wide && tall) return "across the whole image";
    if (wide) return std::string("across the ") + kRows[row] + " row";
    if (tall) return std::string("across the ") + kCols[col] + " column";
    return std::string(kRows[row]) + " " + kCols[col];
}

// ---- Summaries ------------------------------------------------------------------------

std::string MockSummarizer::summarize(const std::string&, std::span<const EvidencePair> pairs) {
    std::string out(resources::kSummaryPreamble);
    for (const auto& p : pairs) {
        out += " In the ";
        out += p.location;
        out += ", ";
        out += p.reason;
        const char last = p.reason.empty() ? ' ' : p.reason.back();
        if (last != '.' && last != '!' && last != '?') out += '.';
    }
    return out;
}

std::vector<EvidencePair> evidence_from(const BoxAnnotation& annotation) {
    std::vector<EvidencePair> out;
    for (const auto& b : annotation.boxes) out.push_back({box_to_spatial_text(b), b.reason});
    return out;
}

std::string summarize_annotations(const std::string& image_id, std::span<const EvidencePair> pairs,
                                  Summarizer& client) {
    if (pairs.empty()) throw ValidationError("summarize: at least one (location, reason) pair is required");
    for (const auto& p : pairs) {
        if (p.location.empty() || p.reason.empty()) throw ValidationError("summarize: empty location or reason");
    }
    return client.summarize(image_id, pairs);
}

// ---- Records ----------------------------------------------------------------------------

ConversationRecord make_record(const ImageSample& sample, const Image& image, Captioner& captioner,
                               std::string_view prompt_version, std::mt19937_64& rng,
                               const std::optional<std::string>& reason) {
    ConversationRecord r;
    r.sample = sample;
    const QAPair content = gen_content_qa(image, captioner, rng);
    const QAPair detection = gen_detection_qa(sample.label, prompt_version);
    r.turns.push_back({"user", "content", content.question});
    r.turns.push_back({"assistant", "content", content.answer});
    r.turns.push_back({"user", "detection", detection.question});
    r.turns.push_back({"assistant", "detection", detection.answer});
    if (reason) {
        r.turns.push_back({"user", "reason", std::string(resources::kReasonQuestion)});
        r.turns.push_back({"assistant", "reason", *reason});
    }
    return r;
}

std::vector<ConversationRecord> assemble_forgreason(std::span<const ConversationRecord> annotated,
                                                    std::span<const ConversationRecord> real_pool,
                                                    std::span<const ConversationRecord> fake_pool,
                                                    const ForgReasonCounts& counts, std::uint64_t seed) {
    std::set<std::string> ids;
    auto register_pool = [&](std::span<const ConversationRecord> pool, const char* name) {
        for (const auto& r : pool) {
            if (!ids.insert(r.sample.id).second) {
                throw ValidationError(std::string("id '") + r.sample.id + "' appears more than once across pools (" +
                                      name + ")");
            }
        }
    };
    register_pool(annotated, "annotated");
    register_pool(real_pool, "real");
    register_pool(fake_pool, "fake");

    std::vector<std::string> shortfalls;
    auto check = [&](std::size_t need, std::size_t have, const char* name) {
        if (have < need) {
            shortfalls.push_back(std::string(name) + ": need " + std::to_string(need) + ", have " +
                                 std::to_string(have) + " (short " + std::to_string(need - have) + ")");
        }
    };
    check(counts.annotated, annotated.size(), "annotated");
    check(counts.real, real_pool.size(), "real");
    check(counts.fake, fake_pool.size(), "fake");
    if (!shortfalls.empty()) {
        std::string msg = "insufficient pools:";
        for (const auto& s : shortfalls) msg += " " + s + ";";
        throw ValidationError(msg);
    }
    for (std::size_t i = 0; i < counts.annotated; ++i) {
        if (!annotated[i].has_reason()) {
            throw ValidationError("annotated record '" + annotated[i].sample.id + "' has no reason turn");
        }
    }

    std::mt19937_64 rng(seed);
    auto sample = [&](std::span<const ConversationRecord> pool, std::size_t k) {
        std::vector<std::size_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        std::vector<ConversationRecord> out;
        for (std::size_t i : idx) {
            ConversationRecord r = pool[i];
            // Sampled records keep only the content and detection rounds.
            std::erase_if(r.turns, [](const Turn& t) { return t.kind == "reason"; });
            out.push_back(std::move(r));
        }
        return out;
    };
    std::vector<ConversationRecord> out(annotated.begin(), annotated.begin() + static_cast<std::ptrdiff_t>(counts.annotated));
    for (auto& r : sample(real_pool, counts.real)) out.push_back(std::move(r));
    for (auto& r : sample(fake_pool, counts.fake)) out.push_back(std::move(r));
    return out;
}

std::vector<std::pair<std::string, std::size_t>> word_frequency(std::span<const std::string> texts,
                                                                std::span<const std::string_view> stopwords) {
    std::set<std::string, std::less<>> stop(stopwords.begin(), stopwords.end());
    std::map<std::string, std::size_t> counts;
    for (const auto& text : texts) {
        std::string word;
        auto flush = [&] {
            if (!word.empty() && !stop.count(word)) ++counts[word];
            word.clear();
        };
        for (char c : text) {
            if (std::isalpha(static_cast<unsigned char>(c))) {
                word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            } else {
                flush();
            }
        }
        flush();
    }
    std::vector<std::pair<std::string, std::size_t>> out(counts.begin(), counts.end());
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return out;
}

std::vector<std::pair<std::string, std::size_t>> word_frequency(std::span<const std::string> texts) {
    return word_frequency(texts, std::span<const std::string_view>(resources::kStopwords));
}

// ---- Synthetic corpus ------------------------------------------------------------------------

ArtifactKind parse_artifact_kind(const std::string& s) {
    if (s == "A") return ArtifactKind::A;
    if (s == "B") return ArtifactKind::B;
    throw ValidationError("artifact kind must be 'A' or 'B', got '" + s + "'");
}

const char* to_string(ArtifactKind k) { return k == ArtifactKind::A ? "A" : "B"; }

std::string synthetic_source(ArtifactKind k) { return std::string("synthetic-") + to_string(k); }

namespace {

constexpr double kCheckerAmplitude = 0.12;
constexpr double kChannelMix = 0.45;

Image textured_image(std::size_t size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> base(0.25, 0.75);
    std::uniform_real_distribution<double> amp(0.04, 0.12);
    std::uniform_real_distribution<double> freq(0.5, 3.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> noise(-0.02, 0.02);
    Image img = Image::zeros(3, size, size);
    const double n = static_cast<double>(size);
    for (std::size_t c = 0; c < 3; ++c) {
        const double b = base(rng);
        const double a1 = amp(rng), a2 = amp(rng);
        const double fx1 = freq(rng), fy1 = freq(rng), fx2 = freq(rng), fy2 = freq(rng);
        const double p1 = phase(rng), p2 = phase(rng);
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                const double u = static_cast<double>(x) / n, v = static_cast<double>(y) / n;
                img.at(c, y, x) = b + a1 * std::sin(2 * M_PI * (fx1 * u + fy1 * v) + p1) +
                                  a2 * std::cos(2 * M_PI * (fx2 * u - fy2 * v) + p2) + noise(rng);
            }
        }
    }
    return img;
}

void quantize(Image& img) {
    for (double& v : img.pixels) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace

std::vector<SyntheticImage> gen_synthetic_dataset(std::uint64_t seed, std::size_t n, ArtifactKind kind,
                                                  const std::string& split, std::size_t size) {
    if (n % 2 != 0) throw ValidationError("synthetic dataset size must be even, got " + std::to_string(n));
    if (split != "train" && split != "test") throw ValidationError("split must be 'train' or 'test'");
    if (size == 0) throw ValidationError("image size must be positive");
    std::vector<SyntheticImage> out;
    out.reserve(n);
    const std::uint64_t stream = (kind == ArtifactKind::A ? 0xA5A5ull : 0xB5B5ull) ^ (split == "train" ? 0 : 0x1000000ull);
    for (std::size_t i = 0; i < n; ++i) {
        std::seed_seq sseq{seed, stream, static_cast<std::uint64_t>(i)};
        std::mt19937_64 rng(sseq);
        SyntheticImage s;
        s.sample.label = i % 2 == 0 ? Label::Real : Label::Fake;
        s.image = textured_image(size, rng);
        if (s.sample.label == Label::Fake) {
            if (kind == ArtifactKind::A) {
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t y = 0; y < size; ++y)
                        for (std::size_t x = 0; x < size; ++x)
                            s.image.at(c, y, x) += (x + y) % 2 == 0 ? kCheckerAmplitude : -kCheckerAmplitude;
            } else {
                for (std::size_t y = 0; y < size; ++y) {
                    for (std::size_t x = 0; x < size; ++x) {
                        const double r = s.image.at(0, y, x);
                        for (std::size_t c = 1; c < 3; ++c) {
                            s.image.at(c, y, x) = (1.0 - kChannelMix) * s.image.at(c, y, x) + kChannelMix * r;
                        }
                    }
                }
            }
        }
        quantize(s.image);
        char id[64];
        std::snprintf(id, sizeof id, "syn%s-%s-%04zu", to_string(kind), split.c_str(), i);
        s.sample.id = id;
        s.sample.image = std::string("images/") + id + ".ppm";
        s.sample.source = synthetic_source(kind);
        s.sample.split = split;
        out.push_back(std::move(s));
    }
    return out;
}

// ---- Images ----------------------------------------------------------------------------------

std::string encode_ppm(const Image& image) {
    if (image.channels != 3) throw ValidationError("PPM output needs 3 channels");
    std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    const std::size_t hw = image.height * image.width;
    for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = std::clamp(image.pixels[c * hw + i], 0.0, 1.0);
            out += static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
        }
    }
    return out;
}

void write_ppm(const std::filesystem::path& file, const Image& image) { write_file_atomic(file, encode_ppm(image)); }

Image read_ppm(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ValidationError("cannot open image " + file.string());
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (!in || magic != "P6" || maxval != 255 || w == 0 || h == 0) {
        throw ValidationError("image " + file.string() + " is not an 8-bit binary PPM");
    }
    in.get();
    std::string bytes(w * h * 3, '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ValidationError("image " + file.string() + " is truncated");
    Image img = Image::zeros(3, h, w);
    const std::size_t hw = w * h;
    for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            img.pixels[c * hw + i] = static_cast<unsigned char>(bytes[i * 3 + c]) / 255.0;
        }
    }
    return img;
}

std::string encode_png(const Image& image) {
    if (image.channels != 3) throw ValidationError("PNG output needs 3 channels");
    const std::size_t w = image.width, h = image.height, hw = w * h;
    std::string raw;
    raw.reserve(h * (1 + 3 * w));
    for (std::size_t y = 0; y < h; ++y) {
        raw += '\0';
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                raw += static_cast<char>(std::lround(std::clamp(image.pixels[c * hw + y * w + x], 0.0, 1.0) * 255.0));
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::string z(zlen, '\0');
    if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 6) != Z_OK) {
        throw std::runtime_error("PNG compression failed");
    }
    z.resize(zlen);
    auto be32 = [](std::string& s, std::uint32_t v) {
        for (int k = 3; k >= 0; --k) s += static_cast<char>((v >> (8 * k)) & 0xff);
    };
    std::string out("\x89PNG\r\n\x1a\n", 8);
    auto chunk = [&](const char* type, const std::string& data) {
        be32(out, static_cast<std::uint32_t>(data.size()));
        std::string td(type, 4);
        td += data;
        out += td;
        be32(out, static_cast<std::uint32_t>(crc32(0, reinterpret_cast<const Bytef*>(td.data()), static_cast<uInt>(td.size()))));
    };
    std::string ihdr;
    be32(ihdr, static_cast<std::uint32_t>(w));
    be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit RGB
    chunk("IHDR", ihdr);
    chunk("IDAT", z);
    chunk("IEND", "");
    return out;
}

// ---- JSON schemas ----------------------------------------------------------------------------

namespace {

const OJson& field(const OJson& j, const char* key, const std::string& path) {
    if (!j.contains(key)) throw SchemaError(path.empty() ? key : path + "." + key, "missing");
    return j.at(key);
}

std::string string_field(const OJson& j, const char* key, const std::string& path, bool nonempty = true) {
    const OJson& v = field(j, key, path);
    const std::string p = path.empty() ? key : path + "." + key;
    if (!v.is_string()) throw SchemaError(p, "expected a string");
    std::string s = v.get<std::string>();
    if (nonempty && s.find_first_not_of(" \t\r\n") == std::string::npos) throw SchemaError(p, "must be nonempty");
    return s;
}

double coord_field(const OJson& j, const char* key, const std::string& path) {
    const OJson& v = field(j, key, path);
    const std::string p = path + "." + key;
    if (!v.is_number()) throw SchemaError(p, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d) || d < 0.0 || d > 1.0) throw SchemaError(p, "must be a normalized coordinate in [0, 1]");
    return d;
}

void check_schema_version(const OJson& j) {
    const OJson& v = field(j, "schema_version", "");
    if (!v.is_number_integer() || v.get<int>() != kSchemaVersion) {
        throw SchemaError("schema_version", "expected " + std::to_string(kSchemaVersion));
    }
}

void reject_extra(const OJson& j, std::initializer_list<const char*> allowed, const std::string& path) {
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!ok.count(it.key())) throw SchemaError(path.empty() ? it.key() : path + "." + it.key(), "unknown field");
    }
}

bool starts_with_yes_no(const std::string& s) { return s.rfind("Yes", 0) == 0 || s.rfind("No", 0) == 0; }

}  // namespace

OJson to_json(const ConversationRecord& r) {
    OJson j;
    j["schema_version"] = kSchemaVersion;
    j["id"] = r.sample.id;
    j["image"] = r.sample.image;
    j["source"] = r.sample.source;
    j["label"] = to_string(r.sample.label);
    j["split"] = r.sample.split;
    OJson conv = OJson::array();
    for (const auto& t : r.turns) conv.push_back({{"role", t.role}, {"kind", t.kind}, {"text", t.text}});
    j["conversations"] = conv;
    return j;
}

ConversationRecord record_from_json(const OJson& j) {
    if (!j.is_object()) throw SchemaError("$", "expected an object");
    reject_extra(j, {"schema_version", "id", "image", "source", "label", "split", "conversations"}, "");
    check_schema_version(j);
    ConversationRecord r;
    r.sample.id = string_field(j, "id", "");
    r.sample.image = string_field(j, "image", "");
    r.sample.source = string_field(j, "source", "");
    if (!is_registered_source(r.sample.source)) throw SchemaError("source", "unregistered source tag '" + r.sample.source + "'");
    const std::string label = string_field(j, "label", "");
    if (label != "real" && label != "fake") throw SchemaError("label", "must be 'real' or 'fake'");
    r.sample.label = parse_label(label);
    r.sample.split = string_field(j, "split", "");
    if (r.sample.split != "train" && r.sample.split != "test") throw SchemaError("split", "must be 'train' or 'test'");
    const OJson& conv = field(j, "conversations", "");
    if (!conv.is_array()) throw SchemaError("conversations", "expected an array");
    for (std::size_t i = 0; i < conv.size(); ++i) {
        const std::string p = "conversations[" + std::to_string(i) + "]";
        if (!conv[i].is_object()) throw SchemaError(p, "expected an object");
        reject_extra(conv[i], {"role", "kind", "text"}, p);
        Turn t{string_field(conv[i], "role", p), string_field(conv[i], "kind", p), string_field(conv[i], "text", p)};
        const char* expected_role = i % 2 == 0 ? "user" : "assistant";
        if (t.role != expected_role) throw SchemaError(p + ".role", std::string("expected '") + expected_role + "'");
        if (t.kind != "content" && t.kind != "detection" && t.kind != "reason") {
            throw SchemaError(p + ".kind", "must be content, detection or reason");
        }
        if (i % 2 == 1 && t.kind != r.turns.back().kind) throw SchemaError(p + ".kind", "differs from its question");
        if (i % 2 == 1 && t.kind == "detection" && !starts_with_yes_no(t.text)) {
            throw SchemaError(p + ".text", "detection answer must begin with Yes or No");
        }
        r.turns.push_back(std::move(t));
    }
    if (conv.size() % 2 != 0) throw SchemaError("conversations", "unpaired question");
    const std::size_t rounds = conv.size() / 2;
    if (rounds < 2 || rounds > 3) throw SchemaError("conversations", "expected 2 or 3 rounds, got " + std::to_string(rounds));
    if (r.turns[0].kind != "content" || r.turns[2].kind != "detection") {
        throw SchemaError("conversations", "rounds must be content then detection");
    }
    if (rounds == 3 && r.turns[4].kind != "reason") throw SchemaError("conversations[4].kind", "third round must be reason");
    return r;
}

OJson to_json(const BoxAnnotation& a) {
    OJson j;
    j["schema_version"] = kSchemaVersion;
    j["image_id"] = a.image_id;
    j["annotator"] = a.annotator;
    j["timestamp"] = a.timestamp;
    OJson boxes = OJson::array();
    for (const auto& b : a.boxes) {
        boxes.push_back({{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}, {"reason", b.reason}});
    }
    j["boxes"] = boxes;
    return j;
}

BoxAnnotation annotation_from_json(const OJson& j) {
    if (!j.is_object()) throw SchemaError("$", "expected an object");
    reject_extra(j, {"schema_version", "image_id", "annotator", "timestamp", "boxes"}, "");
    check_schema_version(j);
    BoxAnnotation a;
    a.image_id = string_field(j, "image_id", "");
    a.annotator = string_field(j, "annotator", "");
    a.timestamp = string_field(j, "timestamp", "");
    const OJson& boxes = field(j, "boxes", "");
    if (!boxes.is_array()) throw SchemaError("boxes", "expected an array");
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const std::string p = "boxes[" + std::to_string(i) + "]";
        if (!boxes[i].is_object()) throw SchemaError(p, "expected an object");
        reject_extra(boxes[i], {"x0", "y0", "x1", "y1", "reason"}, p);
        Box b;
        b.x0 = coord_field(boxes[i], "x0", p);
        b.y0 = coord_field(boxes[i], "y0", p);
        b.x1 = coord_field(boxes[i], "x1", p);
        b.y1 = coord_field(boxes[i], "y1", p);
        b.reason = string_field(boxes[i], "reason", p);
        if (!(b.x0 < b.x1)) throw SchemaError(p + ".x1", "must exceed x0");
        if (!(b.y0 < b.y1)) throw SchemaError(p + ".y1", "must exceed y0");
        a.boxes.push_back(std::move(b));
    }
    return a;
}

// ---- JSONL files -------------------------------------------------------------------------------

namespace {

std::string read_text(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

template <typename T, typename Parse>
std::vector<T> parse_lines(std::string_view text, const std::string& name, Parse&& parse) {
    std::vector<T> out;
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            out.push_back(parse(OJson::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError(name + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(name + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace

std::string dataset_to_jsonl(std::span<const ConversationRecord> records) {
    std::string out;
    for (const auto& r : records) out += to_json(r).dump() + "\n";
    return out;
}

void write_dataset(const std::filesystem::path& file, std::span<const ConversationRecord> records) {
    write_file_atomic(file, dataset_to_jsonl(records));
}

std::vector<ConversationRecord> parse_dataset(std::string_view text, const std::string& name) {
    std::set<std::string> ids;
    auto records = parse_lines<ConversationRecord>(text, name, [&](const OJson& j) {
        ConversationRecord r = record_from_json(j);
        if (!ids.insert(r.sample.id).second) throw SchemaError("id", "duplicate id '" + r.sample.id + "'");
        return r;
    });
    return records;
}

std::vector<ConversationRecord> read_dataset(const std::filesystem::path& file) {
    return parse_dataset(read_text(file), file.string());
}

std::string annotations_to_jsonl(std::span<const BoxAnnotation> annotations) {
    std::string out;
    for (const auto& a : annotations) out += to_json(a).dump() + "\n";
    return out;
}

void write_annotations(const std::filesystem::path& file, std::span<const BoxAnnotation> annotations) {
    write_file_atomic(file, annotations_to_jsonl(annotations));
}

std::vector<BoxAnnotation> parse_annotations(std::string_view text, const std::string& name) {
    return parse_lines<BoxAnnotation>(text, name, [](const OJson& j) { return annotation_from_json(j); });
}

std::vector<BoxAnnotation> read_annotations(const std::filesystem::path& file) {
    return parse_annotations(read_text(file), file.string());
}

std::vector<ImageSample> read_manifest(const std::filesystem::path& file) {
    std::set<std::string> ids;
    return parse_lines<ImageSample>(read_text(file), file.string(), [&](const OJson& j) {
        if (!j.is_object()) throw SchemaError("$", "expected an object");
        reject_extra(j, {"id", "image", "label", "source", "split"}, "");
        ImageSample s;
        s.id = string_field(j, "id", "");
        s.image = string_field(j, "image", "");
        const std::string label = string_field(j, "label", "");
        if (label != "real" && label != "fake") throw SchemaError("label", "must be 'real' or 'fake'");
        s.label = parse_label(label);
        s.source = string_field(j, "source", "");
        if (!is_registered_source(s.source)) throw SchemaError("source", "unregistered source tag '" + s.source + "'");
        s.split = string_field(j, "split", "");
        if (s.split != "train" && s.split != "test") throw SchemaError("split", "must be 'train' or 'test'");
        if (!ids.insert(s.id).second) throw SchemaError("id", "duplicate id '" + s.id + "'");
        return s;
    });
}

LoadedDataset load_dataset_with_images(const std::filesystem::path& file) {
    LoadedDataset d;
    d.records = read_dataset(file);
    const auto dir = std::filesystem::absolute(file).parent_path();
    for (const auto& r : d.records) {
        std::filesystem::path p = r.sample.image;
        if (p.is_relative()) p = dir / p;
        d.images.push_back(std::make_unique<Image>(read_ppm(p)));
    }
    return d;
}

std::vector<Example> training_examples(const LoadedDataset& data, std::string_view system_prompt) {
    std::vector<Example> out;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        const auto& r = data.records[i];
        for (std::size_t t = 0; t + 1 < r.turns.size(); t += 2) {
            Example ex;
            ex.image = data.images[i].get();
            ex.system = std::string(system_prompt);
            ex.question = r.turns[t].text;
            ex.answer = r.turns[t + 1].text;
            ex.label = label_value(r.sample.label);
            out.push_back(std::move(ex));
        }
    }
    return out;
}

}  // namespace forenx
