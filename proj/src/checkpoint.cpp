#include "forenx/checkpoint.hpp"

#include <unistd.h>

#include <atomic>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace forenx {

namespace {

constexpr char kMagic[8] = {'F', 'O', 'R', 'E', 'N', 'X', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

struct RawCheckpoint {
    Json header;
    std::vector<double> data;
};

template <typename T>
void put(std::string& out, const T& v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

RawCheckpoint read_raw(const std::filesystem::path& file, bool with_data) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + file.string());
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t header_len = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw ValidationError("checkpoint " + file.string() + ": bad magic");
    }
    if (version != kFormatVersion) {
        throw ValidationError("checkpoint " + file.string() + ": unsupported format version " +
                              std::to_string(version));
    }
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw ValidationError("checkpoint " + file.string() + ": truncated header");
    RawCheckpoint raw;
    try {
        raw.header = Json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("checkpoint " + file.string() + ": corrupt header: " + e.what());
    }
    if (with_data) {
        const std::uint64_t n = raw.header.at("total_values").get<std::uint64_t>();
        raw.data.resize(n);
        in.read(reinterpret_cast<char*>(raw.data.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw ValidationError("checkpoint " + file.string() + ": truncated tensor data");
        if (in.peek() != std::char_traits<char>::eof()) {
            throw ValidationError("checkpoint " + file.string() + ": trailing bytes after tensor data");
        }
    }
    return raw;
}

struct TensorEntry {
    std::size_t rows, cols, offset;
};

std::map<std::string, TensorEntry> tensor_table(const Json& header) {
    std::map<std::string, TensorEntry> t;
    for (const auto& e : header.at("tensors")) {
        t[e.at("name").get<std::string>()] = {e.at("rows").get<std::size_t>(), e.at("cols").get<std::size_t>(),
                                              e.at("offset").get<std::size_t>()};
    }
    return t;
}

void copy_tensor(const NamedParameter& p, const TensorEntry& e, const std::vector<double>& data,
                 const std::filesystem::path& file) {
    Matrix& v = p.var.node()->value;
    if (v.rows != e.rows || v.cols != e.cols) {
        throw ValidationError("checkpoint " + file.string() + ": tensor '" + p.name + "' has shape " +
                              shape_str(e.rows, e.cols) + ", model expects " + v.shape_str());
    }
    if (e.offset + v.data.size() > data.size()) {
        throw ValidationError("checkpoint " + file.string() + ": tensor '" + p.name + "' out of range");
    }
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(e.offset), v.data.size(), v.data.begin());
}

CheckpointInfo info_from_header(const Json& h) {
    CheckpointInfo info;
    info.stage = h.at("stage").get<int>();
    info.fingerprint = h.at("fingerprint").get<std::string>();
    info.config = model_config_from_json(h.at("config"), "config");
    for (const auto& a : h.at("adapters")) {
        info.adapters.push_back({a.at("module").get<std::string>(), a.at("rank").get<int>(),
                                 a.at("alpha").get<double>(), a.at("dropout").get<double>()});
    }
    for (const auto& t : h.at("tensors")) info.tensor_names.push_back(t.at("name").get<std::string>());
    return info;
}

}  // namespace

void write_file_atomic(const std::filesystem::path& file, const std::string& content) {
    static std::atomic<unsigned> counter{0};
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::filesystem::path tmp = file;
    tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) {
            std::filesystem::remove(tmp);
            throw std::runtime_error("write failed for " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, file);
}

void save_checkpoint(const ForenxModel& model, int stage, const std::filesystem::path& file) {
    Json h;
    h["format"] = "forenx-checkpoint";
    h["stage"] = stage;
    h["fingerprint"] = config_fingerprint(model.config());
    h["config"] = to_json(model.config());
    h["tokenizer"] = model.tokenizer().pieces();
    Json adapters = Json::array();
    for (const auto& [name, proj] : const_cast<ForenxModel&>(model).block_projections()) {
        if (!proj->has_adapter()) continue;
        const auto& a = *proj->adapter();
        adapters.push_back({{"module", name}, {"rank", a.rank}, {"alpha", a.alpha}, {"dropout", a.dropout}});
    }
    h["adapters"] = adapters;
    Json tensors = Json::array();
    std::size_t offset = 0;
    const ParameterList params = model.parameters();
    for (const auto& p : params) {
        const Matrix& v = p.var.value();
        tensors.push_back({{"name", p.name},
                           {"group", to_string(p.group)},
                           {"rows", v.rows},
                           {"cols", v.cols},
                           {"offset", offset}});
        offset += v.data.size();
    }
    h["tensors"] = tensors;
    h["total_values"] = offset;

    const std::string header = h.dump();
    std::string blob;
    blob.reserve(20 + header.size() + offset * sizeof(double));
    blob.append(kMagic, 8);
    put(blob, kFormatVersion);
    put(blob, static_cast<std::uint64_t>(header.size()));
    blob += header;
    for (const auto& p : params) {
        const auto& d = p.var.value().data;
        blob.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    }
    write_file_atomic(file, blob);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& file) {
    return info_from_header(read_raw(file, false).header);
}

std::unique_ptr<ForenxModel> load_checkpoint(const std::filesystem::path& file, CheckpointInfo* info) {
    RawCheckpoint raw = read_raw(file, true);
    CheckpointInfo ci = info_from_header(raw.header);
    if (ci.fingerprint != config_fingerprint(ci.config)) {
        throw ValidationError("checkpoint " + file.string() + ": fingerprint does not match its config");
    }
    auto model = std::make_unique<ForenxModel>(ci.config,
                                               Tokenizer(raw.header.at("tokenizer").get<std::vector<std::string>>()));
    std::map<std::string, LoraLinear*> projections;
    for (auto& [name, proj] : model->block_projections()) projections[name] = proj;
    std::mt19937_64 unused(0);
    for (const auto& a : ci.adapters) {
        auto it = projections.find(a.module);
        if (it == projections.end()) {
            throw ValidationError("checkpoint " + file.string() + ": adapter on unknown module '" + a.module + "'");
        }
        it->second->attach_adapter(a.rank, a.alpha, a.dropout, unused);
    }
    auto table = tensor_table(raw.header);
    const ParameterList params = model->parameters();
    for (const auto& p : params) {
        auto it = table.find(p.name);
        if (it == table.end()) {
            throw ValidationError("checkpoint " + file.string() + ": missing tensor '" + p.name + "'");
        }
        copy_tensor(p, it->second, raw.data, file);
        table.erase(it);
    }
    if (!table.empty()) {
        throw ValidationError("checkpoint " + file.string() + ": unexpected tensor '" + table.begin()->first + "'");
    }
    if (info) *info = std::move(ci);
    return model;
}

void load_groups(ForenxModel& model, const std::filesystem::path& file, const std::set<ParamGroup>& groups) {
    RawCheckpoint raw = read_raw(file, true);
    const auto table = tensor_table(raw.header);
    const auto saved_pieces = raw.header.at("tokenizer").get<std::vector<std::string>>();
    if (saved_pieces != model.tokenizer().pieces()) {
        throw ValidationError("checkpoint " + file.string() + ": tokenizer differs from the model's");
    }
    for (const auto& p : model.parameters()) {
        if (!groups.count(p.group)) continue;
        auto it = table.find(p.name);
        if (it == table.end()) {
            throw ValidationError("checkpoint " + file.string() + ": missing tensor '" + p.name + "'");
        }
        copy_tensor(p, it->second, raw.data, file);
    }
}

}  // namespace forenx
