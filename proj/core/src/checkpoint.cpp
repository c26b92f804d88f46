#include "polyseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "polyseg/errors.hpp"

namespace polyseg {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'P', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}
} // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    json header;
    header["format"] = "polyseg-checkpoint";
    header["config"] = json::parse(to_json(model.config));
    json manifest = json::array();
    for (const auto& [name, t] : model.params) {
        json e;
        e["name"] = name;
        e["shape"] = t.shape();
        manifest.push_back(std::move(e));
    }
    header["tensors"] = std::move(manifest);
    const std::string htext = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw LoadError("cannot open checkpoint for writing: '" + path.string() + "'");
    os.write(kMagic, sizeof(kMagic));
    write_u64(os, htext.size());
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, t] : model.params) {
        static_assert(sizeof(double) == 8);
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    os.flush();
    if (!os) throw LoadError("failed writing checkpoint '" + path.string() + "'");
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open checkpoint '" + path.string() + "'");

    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw LoadError("'" + path.string() + "' is not a polyseg checkpoint");
    const std::uint64_t hlen = read_u64(is);
    std::string htext(hlen, '\0');
    is.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw LoadError("truncated checkpoint header in '" + path.string() + "'");

    json header;
    try {
        header = json::parse(htext);
    } catch (const json::exception& e) {
        throw LoadError("corrupt checkpoint header in '" + path.string() + "': " + e.what());
    }

    Model m;
    m.config = model_config_from_json(header.at("config").dump());
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
        Tensor t{shape};
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!is)
            throw LoadError("truncated tensor '" + name + "' in checkpoint '" + path.string() + "'");
        m.params.emplace(name, std::move(t));
    }
    return m;
}

} // namespace polyseg
