#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "trajgpt/model/model.hpp"

namespace trajgpt::model {

namespace {

constexpr char kMagic[4] = {'T', 'J', 'G', 'P'};

using Kind = CheckpointError::Kind;

template <typename U>
void put_le(std::string& out, U value) {
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes, bytes + sizeof(U));
    }
    out.append(reinterpret_cast<const char*>(bytes), sizeof(U));
}

class Reader {
public:
    Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        unsigned char bytes[sizeof(U)];
        std::memcpy(bytes, data_.data() + pos_, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(bytes, bytes + sizeof(U));
        }
        pos_ += sizeof(U);
        U v;
        std::memcpy(&v, bytes, sizeof(U));
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            throw CheckpointError(Kind::truncated, "checkpoint " + path_ + " is truncated at byte " +
                                                       std::to_string(pos_));
        }
    }

    std::string data_;
    std::string path_;
    std::size_t pos_ = 0;
};

template <typename T>
void put_tensor(std::string& out, const std::string& name, const Matrix<T>& m) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(sizeof(T)));
    for (T v : m.storage()) {
        put_le<T>(out, v);
    }
}

template <typename T>
void get_tensor(Reader& r, const std::string& expected_name, Matrix<T>& dst, const std::string& path) {
    const std::string name = r.bytes(r.get<std::uint32_t>());
    if (name != expected_name) {
        throw CheckpointError(Kind::shape, "checkpoint " + path + ": expected tensor '" +
                                               expected_name + "', found '" + name + "'");
    }
    const std::uint32_t rows = r.get<std::uint32_t>();
    const std::uint32_t cols = r.get<std::uint32_t>();
    const std::uint8_t tag = r.get<std::uint8_t>();
    if (rows != dst.rows() || cols != dst.cols()) {
        throw CheckpointError(Kind::shape, "checkpoint " + path + ": tensor '" + name + "' is " +
                                               std::to_string(rows) + "x" + std::to_string(cols) +
                                               ", config implies " + std::to_string(dst.rows()) +
                                               "x" + std::to_string(dst.cols()));
    }
    if (tag != sizeof(T)) {
        throw CheckpointError(Kind::precision, "checkpoint " + path + ": tensor '" + name +
                                                   "' has precision tag " + std::to_string(tag));
    }
    for (auto& v : dst.storage()) {
        v = r.get<T>();
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(Kind::io, "cannot open checkpoint " + path);
    }
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct Header {
    nlohmann::json config;
};

Header read_header(Reader& r, const std::string& path) {
    const std::string magic = r.bytes(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw CheckpointError(Kind::bad_magic, path + " is not a checkpoint (bad magic bytes)");
    }
    const std::uint32_t version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError(Kind::version, "checkpoint " + path + " has format version " +
                                                 std::to_string(version) + ", expected " +
                                                 std::to_string(kCheckpointVersion));
    }
    const std::string text = r.bytes(r.get<std::uint32_t>());
    Header h;
    try {
        h.config = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::config, "checkpoint " + path + ": unreadable config block: " + e.what());
    }
    return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& path) {
    validate(ck.params);
    nlohmann::json cfg;
    cfg["model"] = to_json(ck.params.config);
    cfg["model"]["precision"] = to_string(precision_of<T>());
    cfg["precision"] = to_string(precision_of<T>());
    cfg["step"] = ck.step;
    cfg["seed"] = ck.seed;
    cfg["extra"] = ck.extra;
    cfg["optimizer"] = ck.optimizer.has_value();
    cfg["optimizer_step"] = ck.optimizer ? ck.optimizer->step : 0;
    const std::string text = cfg.dump();

    std::string out(kMagic, 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    const auto named = ck.params.tensors();
    for (const auto& [name, m] : named) {
        put_tensor(out, name, *m);
    }
    if (ck.optimizer) {
        require(ck.optimizer->m.size() == named.size() && ck.optimizer->v.size() == named.size(),
                "save_checkpoint: optimizer state does not match the parameters");
        for (std::size_t i = 0; i < named.size(); ++i) {
            put_tensor(out, "adam.m/" + named[i].first, ck.optimizer->m[i]);
        }
        for (std::size_t i = 0; i < named.size(); ++i) {
            put_tensor(out, "adam.v/" + named[i].first, ck.optimizer->v[i]);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw CheckpointError(Kind::io, "cannot write checkpoint " + path);
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw CheckpointError(Kind::io, "write failed for checkpoint " + path);
    }
}

Precision checkpoint_precision(const std::string& path) {
    Reader r(read_file(path), path);
    const Header h = read_header(r, path);
    try {
        return precision_from_string(h.config.at("precision").get<std::string>());
    } catch (const std::exception& e) {
        throw CheckpointError(Kind::config, "checkpoint " + path + ": missing precision: " + e.what());
    }
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    Reader r(read_file(path), path);
    const Header h = read_header(r, path);
    Checkpoint<T> ck;
    ModelConfig mc;
    bool has_opt = false;
    std::size_t opt_step = 0;
    Precision stored;
    try {
        stored = precision_from_string(h.config.at("precision").get<std::string>());
        mc = model_config_from_json(h.config.at("model"));
        ck.step = h.config.at("step").get<std::size_t>();
        ck.seed = h.config.at("seed").get<std::uint64_t>();
        ck.extra = h.config.value("extra", nlohmann::json::object());
        has_opt = h.config.at("optimizer").get<bool>();
        opt_step = h.config.at("optimizer_step").get<std::size_t>();
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(Kind::config, "checkpoint " + path + ": invalid config block: " + e.what());
    }
    if (stored != precision_of<T>()) {
        throw CheckpointError(Kind::precision,
                              "checkpoint " + path + " stores " + to_string(stored) +
                                  " values; refusing to cast them to " +
                                  to_string(precision_of<T>()));
    }
    ck.params = init_params<T>(mc, 0);
    const auto named = ck.params.tensors();
    for (const auto& [name, m] : named) {
        get_tensor(r, name, *m, path);
    }
    if (has_opt) {
        AdamState<T> opt = AdamState<T>::zeros(ck.params);
        for (std::size_t i = 0; i < named.size(); ++i) {
            get_tensor(r, "adam.m/" + named[i].first, opt.m[i], path);
        }
        for (std::size_t i = 0; i < named.size(); ++i) {
            get_tensor(r, "adam.v/" + named[i].first, opt.v[i], path);
        }
        opt.step = opt_step;
        ck.optimizer = std::move(opt);
    }
    if (!r.at_end()) {
        throw CheckpointError(Kind::shape, "checkpoint " + path + " has trailing bytes");
    }
    return ck;
}

template void save_checkpoint(const Checkpoint<float>&, const std::string&);
template void save_checkpoint(const Checkpoint<double>&, const std::string&);
template Checkpoint<float> load_checkpoint(const std::string&);
template Checkpoint<double> load_checkpoint(const std::string&);

}  // namespace trajgpt::model
