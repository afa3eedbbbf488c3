#include "medk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace medk {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'E', 'D', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& off) {
    if (off + sizeof(T) > in.size()) throw DataError("truncated checkpoint");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

std::string serialize_checkpoint(const Model& model) {
    std::string out;
    out.append(kMagic, 4);
    put<uint32_t>(out, kVersion);
    const auto& c = model.cfg;
    for (int64_t v : {int64_t(c.vocab_size), int64_t(c.hidden_dim), int64_t(c.num_layers),
                      int64_t(c.num_attn_heads), int64_t(c.head_dim), int64_t(c.intermediate_dim),
                      int64_t(c.num_medusa_heads), int64_t(c.max_seq_len),
                      static_cast<int64_t>(c.rng_seed)})
        put<int64_t>(out, v);

    uint32_t count = 0;
    auto& w = const_cast<Weights&>(model.w);
    for_each_tensor(w, [&](const std::string&, Eigen::Ref<MatrixXd>) { ++count; });
    put<uint32_t>(out, count);
    for_each_tensor(w, [&](const std::string& name, Eigen::Ref<MatrixXd> t) {
        put<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.append(name);
        put<uint64_t>(out, static_cast<uint64_t>(t.rows()));
        put<uint64_t>(out, static_cast<uint64_t>(t.cols()));
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index col = 0; col < t.cols(); ++col) put<double>(out, t(r, col));
    });
    return out;
}

Model deserialize_checkpoint(const std::string& bytes) {
    size_t off = 0;
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw DataError("not a MEDK checkpoint");
    off = 4;
    uint32_t version = take<uint32_t>(bytes, off);
    if (version != kVersion) throw DataError("unsupported checkpoint version");

    ModelConfig c;
    c.vocab_size = static_cast<int>(take<int64_t>(bytes, off));
    c.hidden_dim = static_cast<int>(take<int64_t>(bytes, off));
    c.num_layers = static_cast<int>(take<int64_t>(bytes, off));
    c.num_attn_heads = static_cast<int>(take<int64_t>(bytes, off));
    c.head_dim = static_cast<int>(take<int64_t>(bytes, off));
    c.intermediate_dim = static_cast<int>(take<int64_t>(bytes, off));
    c.num_medusa_heads = static_cast<int>(take<int64_t>(bytes, off));
    c.max_seq_len = static_cast<int>(take<int64_t>(bytes, off));
    c.rng_seed = static_cast<uint64_t>(take<int64_t>(bytes, off));
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("invalid checkpoint config: ") + e.what());
    }

    Model model = init_model(c);  // allocates the right shapes; data overwritten below

    uint32_t count = take<uint32_t>(bytes, off);
    uint32_t seen = 0;
    for_each_tensor(model.w, [&](const std::string& name, Eigen::Ref<MatrixXd> t) {
        uint32_t len = take<uint32_t>(bytes, off);
        if (off + len > bytes.size()) throw DataError("truncated checkpoint");
        std::string got(bytes.data() + off, len);
        off += len;
        if (got != name) throw DataError("unexpected tensor '" + got + "', wanted '" + name + "'");
        auto rows = static_cast<Eigen::Index>(take<uint64_t>(bytes, off));
        auto cols = static_cast<Eigen::Index>(take<uint64_t>(bytes, off));
        if (rows != t.rows() || cols != t.cols())
            throw DataError("tensor shape mismatch for " + name);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index col = 0; col < cols; ++col) t(r, col) = take<double>(bytes, off);
        ++seen;
    });
    if (seen != count) throw DataError("tensor count mismatch in checkpoint");
    if (off != bytes.size()) throw DataError("trailing bytes in checkpoint");
    return model;
}

void save_checkpoint(const Model& model, const std::string& path) {
    std::string bytes = serialize_checkpoint(model);
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace medk
