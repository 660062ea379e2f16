#include "signadapt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <map>
#include <sstream>

#include "signadapt/errors.hpp"

namespace signadapt {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'V', 'P', 'E', '1'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    void read(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw DataError("checkpoint truncated");
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

NamedTensor make_tensor(std::string name, std::vector<std::uint32_t> dims, const double* data, std::size_t count) {
    NamedTensor t{std::move(name), std::move(dims), std::vector<float>(count)};
    for (std::size_t i = 0; i < count; ++i) t.values[i] = static_cast<float>(data[i]);
    return t;
}

std::size_t element_count(const std::vector<std::uint32_t>& dims) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

std::vector<std::uint8_t> read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path sidecar_path(const fs::path& path) {
    return fs::path(path.string() + ".json");
}

std::string meta_json(const CheckpointMeta& meta, const VpeArchitecture& arch) {
    nlohmann::json j;
    j["format"] = kCheckpointFormat;
    j["version"] = meta.version;
    j["parent_version"] = meta.parent_version ? nlohmann::json(*meta.parent_version) : nlohmann::json(nullptr);
    j["parent_path"] = meta.parent_path;
    j["data_fingerprint"] = meta.data_fingerprint;
    j["seed"] = meta.seed;
    j["epochs"] = meta.epochs;
    j["note"] = meta.note;
    j["architecture"] = {{"canvas", arch.canvas},
                         {"latent_dim", arch.latent_dim},
                         {"channels", {arch.channels[0], arch.channels[1], arch.channels[2]}}};
    return j.dump(2) + "\n";
}

CheckpointMeta parse_meta(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("missing checkpoint metadata " + path.string());
    CheckpointMeta meta;
    try {
        const auto j = nlohmann::json::parse(in);
        meta.version = j.at("version").get<std::uint64_t>();
        if (!j.at("parent_version").is_null()) meta.parent_version = j.at("parent_version").get<std::uint64_t>();
        meta.parent_path = j.value("parent_path", "");
        meta.data_fingerprint = j.value("data_fingerprint", "");
        meta.seed = j.value("seed", std::uint64_t{0});
        meta.epochs = j.value("epochs", 0);
        meta.note = j.value("note", "");
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint metadata " + path.string() + ": " + e.what());
    }
    return meta;
}

}  // namespace

std::vector<std::uint8_t> encode_tensors(std::uint32_t latent_dim, std::span<const NamedTensor> tensors) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put<std::uint32_t>(out, kCheckpointFormat);
    put<std::uint32_t>(out, latent_dim);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.name.size() > 0xffff) throw IoError("tensor name too long: " + t.name);
        if (t.dims.size() > 0xff) throw IoError("tensor rank too large: " + t.name);
        if (element_count(t.dims) != t.values.size()) throw IoError("tensor payload does not match dims: " + t.name);
        put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) put<std::uint32_t>(out, d);
        const auto* p = reinterpret_cast<const std::uint8_t*>(t.values.data());
        out.insert(out.end(), p, p + t.values.size() * sizeof(float));
    }
    return out;
}

std::vector<NamedTensor> decode_tensors(std::span<const std::uint8_t> bytes, std::uint32_t* latent_dim) {
    Reader r(bytes);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a VPE1 checkpoint");
    const auto format = r.get<std::uint32_t>();
    if (format != kCheckpointFormat) throw DataError("unsupported checkpoint format " + std::to_string(format));
    const auto dz = r.get<std::uint32_t>();
    if (latent_dim != nullptr) *latent_dim = dz;
    const auto count = r.get<std::uint32_t>();
    std::vector<NamedTensor> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name.resize(r.get<std::uint16_t>());
        r.read(t.name.data(), t.name.size());
        const auto rank = r.get<std::uint8_t>();
        for (int d = 0; d < rank; ++d) t.dims.push_back(r.get<std::uint32_t>());
        const std::size_t n = element_count(t.dims);
        if (n > bytes.size()) throw DataError("tensor " + t.name + " larger than the file");
        t.values.resize(n);
        r.read(t.values.data(), n * sizeof(float));
        tensors.push_back(std::move(t));
    }
    if (!r.done()) throw DataError("trailing bytes after the last tensor");
    return tensors;
}

std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ck) {
    const auto& params = ck.model.vpe;
    const auto& arch = params.architecture();
    std::vector<NamedTensor> tensors;
    for (const auto& slot : params.layout().slots()) {
        tensors.push_back(make_tensor(slot.name, slot.dims, params.values().data() + slot.offset, slot.count));
    }
    const auto k = static_cast<std::uint32_t>(ck.model.head.class_count());
    const auto dz = static_cast<std::uint32_t>(arch.latent_dim);
    tensors.push_back(make_tensor("head.weight", {k, dz}, ck.model.head.weight.data(),
                                  static_cast<std::size_t>(ck.model.head.weight.size())));
    tensors.push_back(make_tensor("head.bias", {k}, ck.model.head.bias.data(),
                                  static_cast<std::size_t>(ck.model.head.bias.size())));

    const auto n = static_cast<std::uint32_t>(ck.catalog.size());
    const auto side = static_cast<std::uint32_t>(arch.canvas);
    NamedTensor ids{"catalog.class_ids", {n}, {}};
    NamedTensor protos{"catalog.prototypes", {n, side, side, 3}, {}};
    NamedTensor centroids{"catalog.centroids", {n, dz}, {}};
    for (const auto& e : ck.catalog.entries) {
        ids.values.push_back(static_cast<float>(e.class_id));
        const auto px = e.prototype.data();
        if (px.size() != static_cast<std::size_t>(side) * side * 3) throw ShapeError("prototype size mismatch");
        protos.values.insert(protos.values.end(), px.begin(), px.end());
        if (e.centroid.dim() != dz) throw ShapeError("centroid dimension mismatch");
        for (double v : e.centroid.values) centroids.values.push_back(static_cast<float>(v));
    }
    tensors.push_back(std::move(ids));
    tensors.push_back(std::move(protos));
    tensors.push_back(std::move(centroids));
    return encode_tensors(dz, tensors);
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot replace " + path.string() + ": " + ec.message());
}

void write_file_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
    require_matching_version(ck.catalog, ck.model.vpe);
    if (ck.meta.version != ck.model.vpe.version) {
        throw ContractViolation("checkpoint metadata version differs from the model version");
    }
    write_file_atomic(path, checkpoint_bytes(ck));
    write_file_atomic(sidecar_path(path), meta_json(ck.meta, ck.model.vpe.architecture()));
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::uint32_t dz = 0;
    const auto tensors = decode_tensors(read_all(path), &dz);
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t;
    auto need = [&](const std::string& name) -> const NamedTensor& {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint lacks tensor " + name);
        return *it->second;
    };

    const auto& protos = need("catalog.prototypes");
    if (protos.dims.size() != 4 || protos.dims[3] != 3 || protos.dims[1] != protos.dims[2]) {
        throw DataError("catalog.prototypes has an unexpected shape");
    }
    VpeArchitecture arch;
    arch.latent_dim = static_cast<int>(dz);
    arch.canvas = static_cast<int>(protos.dims[1]);
    for (int i = 0; i < 3; ++i) {
        const auto& w = need("encoder.conv" + std::to_string(i + 1) + ".weight");
        if (w.dims.empty()) throw DataError("malformed conv weight");
        arch.channels[static_cast<std::size_t>(i)] = static_cast<int>(w.dims[0]);
    }
    try {
        arch.validate();
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint architecture invalid: ") + e.what());
    }

    const auto layout = VpeParameters::make_layout(arch);
    std::vector<double> values(layout.total());
    for (const auto& slot : layout.slots()) {
        const auto& t = need(slot.name);
        if (t.dims != slot.dims) throw DataError("tensor " + slot.name + " has unexpected dimensions");
        for (std::size_t i = 0; i < slot.count; ++i) values[slot.offset + i] = t.values[i];
    }

    Checkpoint ck;
    ck.meta = parse_meta(sidecar_path(path));
    ck.model.vpe = VpeParameters::from_values(arch, std::move(values));
    ck.model.vpe.version = ck.meta.version;

    const auto& hw = need("head.weight");
    const auto& hb = need("head.bias");
    if (hw.dims.size() != 2 || hw.dims[1] != dz || hb.dims.size() != 1 || hb.dims[0] != hw.dims[0]) {
        throw DataError("head tensors have unexpected dimensions");
    }
    ck.model.head = LinearHead::zeros(static_cast<int>(hw.dims[0]), static_cast<int>(dz));
    for (long i = 0; i < ck.model.head.weight.size(); ++i) ck.model.head.weight.data()[i] = hw.values[static_cast<std::size_t>(i)];
    for (long i = 0; i < ck.model.head.bias.size(); ++i) ck.model.head.bias[i] = hb.values[static_cast<std::size_t>(i)];

    const auto& ids = need("catalog.class_ids");
    const std::size_t n = protos.dims[0];
    if (ids.values.size() != n) throw DataError("catalog.class_ids length mismatch");
    const std::size_t plane = static_cast<std::size_t>(arch.canvas) * arch.canvas * 3;
    std::vector<std::pair<int, Image>> images;
    for (std::size_t i = 0; i < n; ++i) {
        Image img(arch.canvas, arch.canvas);
        std::copy_n(protos.values.begin() + static_cast<long>(i * plane), plane, img.data().begin());
        images.emplace_back(static_cast<int>(ids.values[i]), std::move(img));
    }
    // Centroids are re-derived from the stored prototypes so they always match the loaded weights.
    ck.catalog = compute_centroids(PrototypeCatalog::from_images(std::move(images)), ck.model.vpe);
    return ck;
}

std::string dataset_fingerprint(std::span<const LabeledSample> samples) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& s : samples) {
        mix(&s.label, sizeof(s.label));
        const auto px = s.image.data();
        mix(px.data(), px.size_bytes());
    }
    std::ostringstream out;
    out << std::hex;
    out.width(16);
    out.fill('0');
    out << h;
    return out.str();
}

}  // namespace signadapt
