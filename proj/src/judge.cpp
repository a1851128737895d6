#include "forenx/judge.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>

#include "forenx/eval.hpp"
#include "forenx/resources.hpp"

namespace forenx {

namespace {

double round1(double x) { return round_half_up(x, 1); }

void check_metric(double v, const char* name) {
    if (!(v >= 0.0 && v <= 100.0)) {
        throw ValidationError(std::string("judge score ") + name + " = " + std::to_string(v) + " outside [0, 100]");
    }
}

double read_metric(const Json& j, const char* key, const std::string& path) {
    if (!j.contains(key) || !j.at(key).is_number()) {
        throw ValidationError("judge score field '" + path + "." + key + "': expected a number");
    }
    return j.at(key).get<double>();
}

std::vector<std::string> lines_of(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ValidationError("cannot open " + file.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t\r") == std::string::npos; }

}  // namespace

JudgeScore& JudgeScore::recompute_avg() {
    avg = round1((comprehensiveness + relevance + similarity + reasonableness) / 4.0);
    return *this;
}

void JudgeScore::validate() const {
    check_metric(comprehensiveness, "comprehensiveness");
    check_metric(relevance, "relevance");
    check_metric(similarity, "similarity");
    check_metric(reasonableness, "reasonableness");
    check_metric(avg, "avg");
}

Json to_json(const JudgeScore& s) {
    return {{"comprehensiveness", s.comprehensiveness},
            {"relevance", s.relevance},
            {"similarity", s.similarity},
            {"reasonableness", s.reasonableness},
            {"avg", s.avg}};
}

JudgeScore judge_score_from_json(const Json& j, const std::string& path) {
    if (!j.is_object()) throw ValidationError("judge score '" + path + "': expected an object");
    JudgeScore s;
    s.comprehensiveness = read_metric(j, "comprehensiveness", path);
    s.relevance = read_metric(j, "relevance", path);
    s.similarity = read_metric(j, "similarity", path);
    s.reasonableness = read_metric(j, "reasonableness", path);
    s.recompute_avg();
    s.validate();
    return s;
}

std::vector<std::string> content_words(std::string_view text) {
    static const std::set<std::string, std::less<>> stop(resources::kStopwords.begin(), resources::kStopwords.end());
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty() && !stop.count(cur)) out.push_back(cur);
        cur.clear();
    };
    for (char c : text) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

JudgeScore MockJudge::score(std::string_view generated, std::string_view reference) {
    const auto a = content_words(generated);
    const auto b = content_words(reference);
    std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
    for (const auto& w : a) ++counts[w].first;
    for (const auto& w : b) ++counts[w].second;
    std::size_t shared = 0;
    for (const auto& [w, c] : counts) shared += std::min(c.first, c.second);

    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    JudgeScore s;
    if (a.empty() && b.empty()) {
        s.similarity = s.relevance = s.comprehensiveness = 100.0;
    } else {
        s.similarity = 100.0 * 2.0 * static_cast<double>(shared) / (na + nb);
        s.relevance = b.empty() ? 0.0 : 100.0 * static_cast<double>(shared) / nb;
        s.comprehensiveness = b.empty() ? 100.0 : 100.0 * std::min(1.0, na / nb);
    }
    s.reasonableness = (s.similarity + s.relevance + s.comprehensiveness) / 3.0;
    s.similarity = round1(s.similarity);
    s.relevance = round1(s.relevance);
    s.comprehensiveness = round1(s.comprehensiveness);
    s.reasonableness = round1(s.reasonableness);
    return s.recompute_avg();
}

std::string_view judge_rubric() {
    return "You are grading an explanation of why an image is AI-generated against a reference "
           "explanation written by a human expert. Score the candidate from 0 to 100 on each metric:\n"
           "comprehensiveness: how many of the reference's forgery cues the candidate covers.\n"
           "relevance: how much of the candidate concerns the cues in the reference.\n"
           "similarity: how close the candidate's meaning is to the reference overall.\n"
           "reasonableness: whether the candidate's reasoning is coherent and plausible.\n"
           "Reply with only a JSON object with the keys comprehensiveness, relevance, similarity "
           "and reasonableness.";
}

JudgeScore LiveJudge::score(std::string_view generated, std::string_view reference) {
    const std::string user = "Reference explanation:\n" + std::string(reference) +
                             "\n\nCandidate explanation:\n" + std::string(generated);
    const Json messages = Json::array({{{"role", "system"}, {"content", judge_rubric()}},
                                       {{"role", "user"}, {"content", user}}});
    const std::string reply = client_.complete(messages);
    if (log_) {
        log_->append({{"rubric_version", kRubricVersion},
                      {"model", client_.settings().model},
                      {"messages", messages},
                      {"reply", reply}});
    }
    // Tolerate prose or code fences around the object.
    const auto open = reply.find('{');
    const auto close = reply.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open) {
        throw TransportError("judge reply carries no JSON object");
    }
    try {
        JudgeScore s = judge_score_from_json(Json::parse(reply.substr(open, close - open + 1)), "reply");
        s.comprehensiveness = round1(s.comprehensiveness);
        s.relevance = round1(s.relevance);
        s.similarity = round1(s.similarity);
        s.reasonableness = round1(s.reasonableness);
        return s.recompute_avg();
    } catch (const nlohmann::json::exception& e) {
        throw TransportError(std::string("judge reply is not valid JSON: ") + e.what());
    } catch (const ValidationError& e) {
        throw TransportError(std::string("judge reply rejected: ") + e.what());
    }
}

JudgeScore judge_explanation(std::string_view generated, std::string_view reference, Judge& judge) {
    if (generated.find_first_not_of(" \t\r\n") == std::string_view::npos) {
        throw ValidationError("judge: generated explanation is empty");
    }
    if (reference.find_first_not_of(" \t\r\n") == std::string_view::npos) {
        throw ValidationError("judge: reference explanation is empty");
    }
    JudgeScore s = judge.score(generated, reference);
    s.recompute_avg();
    s.validate();
    return s;
}

JudgeScore average_iterations(std::span<const JudgeScore> scores, bool strict, std::size_t expected) {
    if (scores.empty()) throw ValidationError("average_iterations: no scores");
    if (strict && scores.size() != expected) {
        throw ValidationError("average_iterations: expected " + std::to_string(expected) + " iterations, got " +
                              std::to_string(scores.size()));
    }
    JudgeScore m;
    for (const auto& s : scores) {
        m.comprehensiveness += s.comprehensiveness;
        m.relevance += s.relevance;
        m.similarity += s.similarity;
        m.reasonableness += s.reasonableness;
    }
    const double n = static_cast<double>(scores.size());
    m.comprehensiveness = round1(m.comprehensiveness / n);
    m.relevance = round1(m.relevance / n);
    m.similarity = round1(m.similarity / n);
    m.reasonableness = round1(m.reasonableness / n);
    return m.recompute_avg();
}

Json to_json(const JudgeRecord& r) {
    Json its = Json::array();
    for (const auto& s : r.iterations) its.push_back(to_json(s));
    return {{"pair_id", r.pair.id},
            {"generated", r.pair.generated},
            {"reference", r.pair.reference},
            {"iterations", its},
            {"mean", to_json(r.mean)},
            {"backend", r.backend},
            {"rubric_version", r.rubric_version}};
}

std::vector<JudgePair> read_judge_pairs(const std::filesystem::path& file) {
    std::vector<JudgePair> out;
    std::set<std::string> ids;
    const auto lines = lines_of(file);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (blank(lines[i])) continue;
        const std::string where = file.string() + ":" + std::to_string(i + 1) + ": ";
        Json j;
        try {
            j = Json::parse(lines[i]);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(where + "invalid JSON: " + e.what());
        }
        if (!j.is_object()) throw ValidationError(where + "expected an object");
        JudgePair p;
        for (const char* key : {"id", "generated", "reference"}) {
            if (!j.contains(key) || !j.at(key).is_string()) throw ValidationError(where + key + ": expected a string");
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() != "id" && it.key() != "generated" && it.key() != "reference") {
                throw ValidationError(where + it.key() + ": unknown field");
            }
        }
        p.id = j.at("id").get<std::string>();
        p.generated = j.at("generated").get<std::string>();
        p.reference = j.at("reference").get<std::string>();
        if (!ids.insert(p.id).second) throw ValidationError(where + "id: duplicate '" + p.id + "'");
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<JudgeRecord> judge_pairs(std::span<const JudgePair> pairs, Judge& judge, std::size_t iterations) {
    if (iterations == 0) throw ValidationError("judge: iterations must be positive");
    std::vector<JudgeRecord> out;
    for (const auto& p : pairs) {
        JudgeRecord r;
        r.pair = p;
        r.backend = judge.backend();
        r.rubric_version = judge.rubric_version();
        for (std::size_t i = 0; i < iterations; ++i) r.iterations.push_back(judge_explanation(p.generated, p.reference, judge));
        r.mean = average_iterations(r.iterations, true, iterations);
        out.push_back(std::move(r));
    }
    return out;
}

// ---- User study ---------------------------------------------------------------------------

void UserRating::validate() const {
    if (rater.empty()) throw ValidationError("rater: must not be empty");
    if (method.empty()) throw ValidationError("method: must not be empty");
    for (std::size_t a = 0; a < scores.size(); ++a) {
        if (scores[a] < 1 || scores[a] > 5) {
            throw ValidationError(std::string("scores.") + std::string(kUserStudyAspects[a]) + ": " +
                                  std::to_string(scores[a]) + " outside [1, 5]");
        }
    }
}

Json to_json(const UserRating& r) {
    Json scores;
    for (std::size_t a = 0; a < r.scores.size(); ++a) scores[std::string(kUserStudyAspects[a])] = r.scores[a];
    return {{"rater", r.rater},
            {"method", r.method},
            {"image_id", r.image_id},
            {"scores", scores},
            {"presented_position", r.presented_position}};
}

UserRating user_rating_from_json(const Json& j) {
    cfg::reject_unknown(j, {"rater", "method", "image_id", "scores", "presented_position"}, "");
    UserRating r;
    auto str = [&](const char* key) {
        if (!j.contains(key) || !j.at(key).is_string()) throw ValidationError(std::string(key) + ": expected a string");
        return j.at(key).get<std::string>();
    };
    r.rater = str("rater");
    r.method = str("method");
    if (j.contains("image_id")) r.image_id = str("image_id");
    if (j.contains("presented_position")) {
        if (!j.at("presented_position").is_number_integer()) throw ValidationError("presented_position: expected an integer");
        r.presented_position = j.at("presented_position").get<int>();
    }
    if (!j.contains("scores") || !j.at("scores").is_object()) throw ValidationError("scores: expected an object");
    const Json& s = j.at("scores");
    for (auto it = s.begin(); it != s.end(); ++it) {
        if (std::find(kUserStudyAspects.begin(), kUserStudyAspects.end(), it.key()) == kUserStudyAspects.end()) {
            throw ValidationError("scores." + it.key() + ": unknown aspect");
        }
    }
    for (std::size_t a = 0; a < kUserStudyAspects.size(); ++a) {
        const std::string key(kUserStudyAspects[a]);
        if (!s.contains(key) || !s.at(key).is_number_integer()) {
            throw ValidationError("scores." + key + ": expected an integer");
        }
        r.scores[a] = s.at(key).get<int>();
    }
    r.validate();
    return r;
}

std::vector<UserRating> read_user_study(const std::filesystem::path& file) {
    std::vector<UserRating> out;
    const auto lines = lines_of(file);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (blank(lines[i])) continue;
        try {
            out.push_back(user_rating_from_json(Json::parse(lines[i])));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(file.string() + ":" + std::to_string(i + 1) + ": invalid JSON: " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(file.string() + ":" + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return out;
}

std::map<std::string, std::array<double, 5>> aggregate_user_study(std::span<const UserRating> ratings) {
    if (ratings.empty()) throw ValidationError("aggregate_user_study: no ratings");
    std::map<std::string, std::pair<std::array<long, 5>, long>> sums;
    for (const auto& r : ratings) {
        r.validate();
        auto& [s, n] = sums[r.method];
        for (std::size_t a = 0; a < 5; ++a) s[a] += r.scores[a];
        ++n;
    }
    std::map<std::string, std::array<double, 5>> out;
    for (const auto& [method, entry] : sums) {
        auto& m = out[method];
        for (std::size_t a = 0; a < 5; ++a) m[a] = static_cast<double>(entry.first[a]) / static_cast<double>(entry.second);
    }
    return out;
}

}  // namespace forenx
