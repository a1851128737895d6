#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forenx/clients.hpp"
#include "forenx/config.hpp"

namespace forenx {

struct JudgeScore {
    double comprehensiveness = 0.0;
    double relevance = 0.0;
    double similarity = 0.0;
    double reasonableness = 0.0;
    double avg = 0.0;

    /// avg = one-decimal mean of the four metrics.
    JudgeScore& recompute_avg();
    void validate() const;
    bool operator==(const JudgeScore&) const = default;
};

Json to_json(const JudgeScore& s);
JudgeScore judge_score_from_json(const Json& j, const std::string& path = "score");

class Judge {
public:
    virtual ~Judge() = default;
    virtual JudgeScore score(std::string_view generated, std::string_view reference) = 0;
    virtual std::string backend() const = 0;
    virtual std::string rubric_version() const = 0;
};

/// Content words: lowercase letter runs minus the shared stopword list.
std::vector<std::string> content_words(std::string_view text);

/// Word-overlap surrogate (A = generated, B = reference content words):
/// similarity 100*2*shared/(|A|+|B|), relevance 100*shared/|B|,
/// comprehensiveness 100*min(1, |A|/|B|), reasonableness the mean of those three.
/// These numbers only exercise the pipeline; they do not model a language-model judge.
class MockJudge : public Judge {
public:
    JudgeScore score(std::string_view generated, std::string_view reference) override;
    std::string backend() const override { return "mock"; }
    std::string rubric_version() const override { return "mock-overlap-1"; }
};

inline constexpr std::string_view kRubricVersion = "forenx-rubric-1";
std::string_view judge_rubric();

/// Sends the rubric plus both texts and expects a JSON object with the four metrics.
/// Every request and reply is appended to `log`.
class LiveJudge : public Judge {
public:
    LiveJudge(const ChatClient& client, RequestLog* log = nullptr) : client_(client), log_(log) {}
    JudgeScore score(std::string_view generated, std::string_view reference) override;
    std::string backend() const override { return "live"; }
    std::string rubric_version() const override { return std::string(kRubricVersion); }

private:
    const ChatClient& client_;
    RequestLog* log_;
};

/// Rejects empty texts; returns the judge's score with avg recomputed.
JudgeScore judge_explanation(std::string_view generated, std::string_view reference, Judge& judge);

/// Metric-wise mean, avg recomputed from the averaged four. Exactly `expected` entries
/// are required when strict.
JudgeScore average_iterations(std::span<const JudgeScore> scores, bool strict = true, std::size_t expected = 3);

struct JudgePair {
    std::string id;
    std::string generated;
    std::string reference;
};

struct JudgeRecord {
    JudgePair pair;
    std::vector<JudgeScore> iterations;
    JudgeScore mean;
    std::string backend;
    std::string rubric_version;
};

Json to_json(const JudgeRecord& r);
/// One {"id", "generated", "reference"} per line.
std::vector<JudgePair> read_judge_pairs(const std::filesystem::path& file);
/// Sequential iterations per pair.
std::vector<JudgeRecord> judge_pairs(std::span<const JudgePair> pairs, Judge& judge, std::size_t iterations);

// ---- User study ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 5> kUserStudyAspects{
    "accuracy", "relevance", "reasonableness", "completeness", "overall"};

struct UserRating {
    std::string rater;
    std::string method;
    std::string image_id;
    std::array<int, 5> scores{};  // kUserStudyAspects order, each in [1, 5]
    int presented_position = 0;   // blind presentation order, kept but not scored

    void validate() const;
};

Json to_json(const UserRating& r);
UserRating user_rating_from_json(const Json& j);
std::vector<UserRating> read_user_study(const std::filesystem::path& file);

/// Mean per (method, aspect).
std::map<std::string, std::array<double, 5>> aggregate_user_study(std::span<const UserRating> ratings);

}  // namespace forenx
