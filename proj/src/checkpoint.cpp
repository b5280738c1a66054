#include "hgnp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <type_traits>
#include <vector>

#include "hgnp/util.hpp"

namespace hgnp {

namespace {

constexpr char kMagic[4] = {'H', 'G', 'N', 'P'};
constexpr std::uint16_t kVersion = 1;

struct Writer {
    std::ofstream f;
    explicit Writer(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw IoError(path + ": cannot open for writing");
    }
    void bytes(const void* p, std::size_t n) {
        f.write(static_cast<const char*>(p), std::streamsize(n));
    }
    template <typename T>
    void le(T v) {
        static_assert(std::is_integral_v<T>);
        unsigned char buf[sizeof(T)];
        for (std::size_t i = 0; i < sizeof(T); ++i)
            buf[i] = static_cast<unsigned char>((std::make_unsigned_t<T>(v) >> (8 * i)) & 0xff);
        bytes(buf, sizeof(T));
    }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
};

struct Reader {
    std::ifstream f;
    std::string path;
    std::size_t offset = 0;
    explicit Reader(const std::string& p) : f(p, std::ios::binary), path(p) {
        if (!f) throw IoError(p + ": cannot open");
    }
    void bytes(void* p, std::size_t n) {
        if (!f.read(static_cast<char*>(p), std::streamsize(n)))
            throw IoError(path + ": truncated at byte offset " + std::to_string(offset));
        offset += n;
    }
    template <typename T>
    T le() {
        unsigned char buf[sizeof(T)];
        bytes(buf, sizeof(T));
        std::make_unsigned_t<T> v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= std::make_unsigned_t<T>(buf[i]) << (8 * i);
        return static_cast<T>(v);
    }
    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
};

}  // namespace

void save_checkpoint(const MaskedNetwork& net, const std::string& path) {
    Writer w(path);
    w.bytes(kMagic, 4);
    w.le<std::uint16_t>(kVersion);
    w.le<std::uint16_t>(0);
    w.le<std::uint64_t>(net.original_param_count);
    w.le<std::uint8_t>(net.input_shape.image ? 1 : 0);
    w.le<std::uint32_t>(std::uint32_t(net.input_shape.channels));
    w.le<std::uint32_t>(std::uint32_t(net.input_shape.height));
    w.le<std::uint32_t>(std::uint32_t(net.input_shape.width));
    w.le<std::uint32_t>(std::uint32_t(net.layers.size()));
    for (const auto& layer : net.layers) {
        const LayerSpec& s = layer.spec;
        w.le<std::uint8_t>(std::uint8_t(s.kind));
        w.le<std::uint32_t>(std::uint32_t(s.fan_in));
        w.le<std::uint32_t>(std::uint32_t(s.fan_out));
        w.le<std::uint32_t>(std::uint32_t(s.kernel_h));
        w.le<std::uint32_t>(std::uint32_t(s.kernel_w));
        w.le<std::uint8_t>(std::uint8_t(s.padding));
        w.le<std::uint8_t>(s.fused_pool ? 1 : 0);
        w.le<std::int32_t>(s.group_id);
        w.le<std::int32_t>(s.source_layer);
    }

    std::vector<std::uint8_t> bits;
    for (const auto& layer : net.layers)
        if (layer.parameterized())
            bits.insert(bits.end(), layer.mask.begin(), layer.mask.end());
    w.le<std::uint64_t>(bits.size());
    std::uint8_t packed = 0;
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) packed |= std::uint8_t(1u << (i % 8));
        if (i % 8 == 7) {
            w.le<std::uint8_t>(packed);
            packed = 0;
        }
    }
    if (bits.size() % 8 != 0) w.le<std::uint8_t>(packed);

    for (const auto& layer : net.layers) {
        if (!layer.parameterized()) continue;
        for (double v : layer.weight.data) w.f64(v);
        for (double v : layer.bias) w.f64(v);
    }
    w.f.flush();
    if (!w.f) throw IoError(path + ": write failed");
}

MaskedNetwork load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": bad magic");
    const auto version = r.le<std::uint16_t>();
    if (version != kVersion)
        throw IoError(path + ": format version " + std::to_string(version) +
                      " not supported (expected " + std::to_string(kVersion) + ")");
    r.le<std::uint16_t>();  // reserved

    const auto original_params = r.le<std::uint64_t>();
    ModelSpec spec;
    spec.input.image = r.le<std::uint8_t>() != 0;
    spec.input.channels = r.le<std::uint32_t>();
    spec.input.height = r.le<std::uint32_t>();
    spec.input.width = r.le<std::uint32_t>();
    const auto layer_count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < layer_count; ++i) {
        LayerSpec s;
        const auto kind = r.le<std::uint8_t>();
        if (kind > std::uint8_t(LayerKind::ResidualAdd))
            throw IoError(path + ": unknown layer kind " + std::to_string(kind));
        s.kind = LayerKind(kind);
        s.fan_in = r.le<std::uint32_t>();
        s.fan_out = r.le<std::uint32_t>();
        s.kernel_h = r.le<std::uint32_t>();
        s.kernel_w = r.le<std::uint32_t>();
        s.padding = Padding(r.le<std::uint8_t>() != 0 ? 1 : 0);
        s.fused_pool = r.le<std::uint8_t>() != 0;
        s.group_id = r.le<std::int32_t>();
        s.source_layer = r.le<std::int32_t>();
        spec.layers.push_back(s);
    }

    MaskedNetwork net = init_network(spec, 0);
    net.original_param_count = original_params;

    const auto bit_count = r.le<std::uint64_t>();
    if (bit_count != net.total_neurons())
        throw IoError(path + ": mask bit count " + std::to_string(bit_count) +
                      " does not match the layer table");
    std::vector<std::uint8_t> bits(bit_count);
    std::uint8_t packed = 0;
    for (std::size_t i = 0; i < bit_count; ++i) {
        if (i % 8 == 0) packed = r.le<std::uint8_t>();
        bits[i] = (packed >> (i % 8)) & 1u;
    }
    std::size_t pos = 0;
    for (auto& layer : net.layers) {
        if (!layer.parameterized()) continue;
        for (auto& b : layer.mask) b = bits[pos++];
    }

    for (auto& layer : net.layers) {
        if (!layer.parameterized()) continue;
        for (double& v : layer.weight.data) v = r.f64();
        for (double& v : layer.bias) v = r.f64();
    }
    return net;
}

}  // namespace hgnp
