#include "sca/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace sca {

void RunConfig::validate() const {
    train.validate();
    if (block_style != "plain") {
        throw ConfigError("block_style '" + block_style +
                          "': the run interface supports plain chains");
    }
    if (data == "synth") {
        if (synth_classes < 2) throw ConfigError("synth_classes must be >= 2");
        if (synth_train_per_class < 1 || synth_test_per_class < 1) {
            throw ConfigError("synthetic per-class sample counts must be >= 1");
        }
        if (synth_hw < 2) throw ConfigError("synth_hw must be >= 2");
        if (synth_noise < 0.0) throw ConfigError("synth_noise must be >= 0");
    }
    if (arch.empty()) throw ConfigError("arch must not be empty");
}

namespace {

std::string trim(std::string s) {
    const char* ws = " \t\r";
    s.erase(0, s.find_first_not_of(ws));
    auto last = s.find_last_not_of(ws);
    s.erase(last == std::string::npos ? 0 : last + 1);
    return s;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse number '" + v + "'");
    }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::int64_t x = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), x);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
        throw ConfigError("key '" + key + "': cannot parse integer '" + v + "'");
    }
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': cannot parse boolean '" + v + "'");
}

std::string format_float(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty() || val.empty()) {
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
        }

        if (key == "data") cfg.data = val;
        else if (key == "synth_classes") cfg.synth_classes = int(parse_int(key, val));
        else if (key == "synth_train_per_class") cfg.synth_train_per_class = int(parse_int(key, val));
        else if (key == "synth_test_per_class") cfg.synth_test_per_class = int(parse_int(key, val));
        else if (key == "synth_hw") cfg.synth_hw = int(parse_int(key, val));
        else if (key == "synth_noise") cfg.synth_noise = parse_double(key, val);
        else if (key == "arch") cfg.arch = val;
        else if (key == "block_style") cfg.block_style = val;
        else if (key == "t_steps") cfg.train.t_steps = int(parse_int(key, val));
        else if (key == "neuron") {
            if (val == "IF") cfg.train.neuron.kind = NeuronKind::IF;
            else if (val == "LIF") cfg.train.neuron.kind = NeuronKind::LIF;
            else throw ConfigError("key 'neuron': expected IF or LIF, got '" + val + "'");
        }
        else if (key == "v_th") cfg.train.neuron.v_th = scalar(parse_double(key, val));
        else if (key == "v_reset") cfg.train.neuron.v_reset = scalar(parse_double(key, val));
        else if (key == "tau_m") cfg.train.neuron.tau_m = scalar(parse_double(key, val));
        else if (key == "alpha") cfg.train.neuron.alpha = scalar(parse_double(key, val));
        else if (key == "epochs") cfg.train.epochs = int(parse_int(key, val));
        else if (key == "batch_size") cfg.train.batch_size = int(parse_int(key, val));
        else if (key == "learning_rate") cfg.train.learning_rate = parse_double(key, val);
        else if (key == "momentum") cfg.train.momentum = parse_double(key, val);
        else if (key == "l1_lambda") cfg.train.l1_lambda = parse_double(key, val);
        else if (key == "seed") cfg.train.seed = std::uint64_t(parse_int(key, val));
        else if (key == "exact_importance_pass") cfg.train.exact_importance_pass = parse_bool(key, val);
        else if (key == "p") cfg.train.prune.p = parse_double(key, val);
        else if (key == "q") cfg.train.prune.q = parse_double(key, val);
        else if (key == "interval_epochs") cfg.train.prune.interval_epochs = int(parse_int(key, val));
        else if (key == "min_channels") cfg.train.prune.min_channels = int(parse_int(key, val));
        else if (key == "mode") cfg.train.prune.mode = parse_prune_mode(val);
        else throw ConfigError("unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

RunConfig parse_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config '" + path.string() + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

std::string canonical_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "data = " << cfg.data << "\n";
    if (cfg.data == "synth") {
        os << "synth_classes = " << cfg.synth_classes << "\n";
        os << "synth_train_per_class = " << cfg.synth_train_per_class << "\n";
        os << "synth_test_per_class = " << cfg.synth_test_per_class << "\n";
        os << "synth_hw = " << cfg.synth_hw << "\n";
        os << "synth_noise = " << format_float(cfg.synth_noise) << "\n";
    }
    os << "arch = " << cfg.arch << "\n";
    os << "block_style = " << cfg.block_style << "\n";
    os << "t_steps = " << cfg.train.t_steps << "\n";
    os << "neuron = " << (cfg.train.neuron.kind == NeuronKind::IF ? "IF" : "LIF") << "\n";
    os << "v_th = " << format_float(double(cfg.train.neuron.v_th)) << "\n";
    os << "v_reset = " << format_float(double(cfg.train.neuron.v_reset)) << "\n";
    os << "tau_m = " << format_float(double(cfg.train.neuron.tau_m)) << "\n";
    os << "alpha = " << format_float(double(cfg.train.neuron.alpha)) << "\n";
    os << "epochs = " << cfg.train.epochs << "\n";
    os << "batch_size = " << cfg.train.batch_size << "\n";
    os << "learning_rate = " << format_float(cfg.train.learning_rate) << "\n";
    os << "momentum = " << format_float(cfg.train.momentum) << "\n";
    os << "l1_lambda = " << format_float(cfg.train.l1_lambda) << "\n";
    os << "seed = " << cfg.train.seed << "\n";
    os << "exact_importance_pass = " << (cfg.train.exact_importance_pass ? "true" : "false") << "\n";
    os << "p = " << format_float(cfg.train.prune.p) << "\n";
    os << "q = " << format_float(cfg.train.prune.q) << "\n";
    os << "interval_epochs = " << cfg.train.prune.interval_epochs << "\n";
    os << "min_channels = " << cfg.train.prune.min_channels << "\n";
    os << "mode = " << prune_mode_name(cfg.train.prune.mode) << "\n";
    return os.str();
}

}  // namespace sca
