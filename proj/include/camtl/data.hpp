#pragma once

// Synthetic multi-task data and TSV ingestion.
//
// Token layout shared by every source: 0 pads, 1 is the leading CLS token and
// content tokens start at 2.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "camtl/dataset.hpp"
#include "camtl/model.hpp"

namespace camtl {

enum class Generator { pattern_presence, majority, parity, regression };

inline std::string to_string(Generator g) {
    switch (g) {
        case Generator::pattern_presence: return "pattern_presence";
        case Generator::majority: return "majority";
        case Generator::parity: return "parity";
        case Generator::regression: return "regression";
    }
    return "?";
}

inline Generator parse_generator(const std::string& s) {
    if (s == "pattern_presence") return Generator::pattern_presence;
    if (s == "majority") return Generator::majority;
    if (s == "parity") return Generator::parity;
    if (s == "regression") return Generator::regression;
    throw std::invalid_argument("unknown synthetic generator '" + s + "'");
}

struct SyntheticSpec {
    Generator generator = Generator::pattern_presence;
    std::size_t size = 1000;
    std::size_t seq_len = 16;
    std::size_t vocab = 16;         // content tokens, ids 2 .. vocab + 1
    std::size_t motif_length = 2;   // pattern_presence motif, parity marker count
    std::size_t classes = 2;        // majority only
    double label_noise = 0.0;       // probability a label is replaced by a uniform draw
    std::size_t min_length = 0;     // content length lower bound, 0 picks half the sequence
    std::uint64_t seed = 0;         // generator rules (motif, token groups)
    std::uint64_t sample_seed = 0;  // the examples themselves
};

inline std::size_t synthetic_classes(const SyntheticSpec& s) {
    switch (s.generator) {
        case Generator::majority: return s.classes;
        case Generator::regression: return 1;
        default: return 2;
    }
}

namespace detail {

struct Rules {
    std::vector<int> motif;     // pattern_presence
    std::vector<int> markers;   // parity
    std::vector<int> group;     // majority and regression: group of each content token
};

inline Rules make_rules(const SyntheticSpec& s) {
    std::mt19937_64 rng(s.seed ^ 0x5851f42d4c957f2dULL);
    std::uniform_int_distribution<int> tok(2, static_cast<int>(s.vocab) + 1);
    Rules r;
    for (std::size_t i = 0; i < s.motif_length; ++i) r.motif.push_back(tok(rng));
    std::vector<int> all;
    for (int t = 2; t < static_cast<int>(s.vocab) + 2; ++t) all.push_back(t);
    std::shuffle(all.begin(), all.end(), rng);
    r.markers.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(s.motif_length, all.size())));
    r.group.assign(s.vocab + 2, -1);
    const std::size_t groups = s.generator == Generator::majority ? s.classes : 2;
    std::shuffle(all.begin(), all.end(), rng);
    for (std::size_t i = 0; i < all.size(); ++i) r.group[static_cast<std::size_t>(all[i])] = static_cast<int>(i % groups);
    return r;
}

inline bool contains_motif(const std::vector<int>& content, const std::vector<int>& motif) {
    if (motif.empty() || content.size() < motif.size()) return false;
    return std::search(content.begin(), content.end(), motif.begin(), motif.end()) != content.end();
}

inline std::vector<int> finish(std::vector<int> content, std::size_t seq_len) {
    std::vector<int> tokens{kClsToken};
    tokens.insert(tokens.end(), content.begin(), content.end());
    tokens.resize(seq_len, kPadToken);
    return tokens;
}

inline double apply_rule(const SyntheticSpec& s, const Rules& rules, const std::vector<int>& tokens) {
    std::vector<int> content;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        if (tokens[i] != kPadToken) content.push_back(tokens[i]);
    }
    switch (s.generator) {
        case Generator::pattern_presence: return contains_motif(content, rules.motif) ? 1.0 : 0.0;
        case Generator::parity: {
            std::size_t n = 0;
            for (int t : content) n += std::count(rules.markers.begin(), rules.markers.end(), t) > 0;
            return static_cast<double>(n % 2);
        }
        case Generator::majority: {
            std::vector<std::size_t> counts(s.classes, 0);
            for (int t : content) ++counts[static_cast<std::size_t>(rules.group[static_cast<std::size_t>(t)])];
            return static_cast<double>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        }
        case Generator::regression: {
            std::size_t pos = 0;
            for (int t : content) pos += rules.group[static_cast<std::size_t>(t)] == 1;
            return content.empty() ? 0.0 : static_cast<double>(pos) / static_cast<double>(content.size());
        }
    }
    return 0.0;
}

}  // namespace detail

// True label before noise, read back from the tokens. Serves as the
// rule-based oracle for generated data.
inline double synthetic_rule(const SyntheticSpec& s, const std::vector<int>& tokens) {
    return detail::apply_rule(s, detail::make_rules(s), tokens);
}

// Deterministic dataset. Classification sets are balanced over the clean
// labels; noise then replaces a fraction of labels with uniform draws.
// Regression targets lie in [0, 1], noise adds Gaussian jitter with that
// standard deviation and clamps.
inline Dataset generate_synthetic(const SyntheticSpec& s, const std::string& name = "synthetic") {
    if (s.seq_len < 4) throw std::invalid_argument("synthetic data needs seq_len >= 4");
    if (s.vocab < 2) throw std::invalid_argument("synthetic data needs at least 2 content tokens");
    if (s.label_noise < 0.0 || s.label_noise > 1.0) throw std::invalid_argument("label_noise must be in [0, 1]");
    if (s.generator == Generator::majority && s.classes < 2) throw std::invalid_argument("majority needs >= 2 classes");
    if (s.generator == Generator::pattern_presence && (s.motif_length == 0 || s.motif_length + 1 > s.seq_len - 1)) {
        throw std::invalid_argument("pattern_presence motif does not fit the sequence");
    }
    if (s.generator == Generator::parity && (s.motif_length == 0 || s.motif_length >= s.vocab)) {
        throw std::invalid_argument("parity needs between 1 and vocab - 1 marker tokens");
    }
    const auto rules = detail::make_rules(s);
    std::mt19937_64 rng(s.sample_seed * 0x9e3779b97f4a7c15ULL + s.seed + 1);
    std::uniform_int_distribution<int> tok(2, static_cast<int>(s.vocab) + 1);
    const std::size_t max_len = s.seq_len - 1;
    std::size_t min_len = s.min_length == 0 ? std::max<std::size_t>(max_len / 2, 1) : s.min_length;
    if (s.generator == Generator::pattern_presence) min_len = std::max(min_len, s.motif_length + 1);
    min_len = std::min(min_len, max_len);
    std::uniform_int_distribution<std::size_t> length(min_len, max_len);
    const std::size_t C = synthetic_classes(s);
    std::uniform_int_distribution<std::size_t> any_class(0, std::max<std::size_t>(C, 2) - 1);
    std::bernoulli_distribution flip(s.label_noise);
    std::normal_distribution<double> jitter(0.0, s.label_noise);

    Dataset out;
    out.name = name;
    for (std::size_t i = 0; i < s.size; ++i) {
        std::vector<int> content;
        double clean = 0.0;
        if (s.generator == Generator::regression) {
            content.resize(length(rng));
            for (auto& t : content) t = tok(rng);
            clean = detail::apply_rule(s, rules, detail::finish(content, s.seq_len));
            double y = clean;
            if (s.label_noise > 0.0) y = std::clamp(clean + jitter(rng), 0.0, 1.0);
            out.examples.push_back({detail::finish(content, s.seq_len), y});
            continue;
        }
        const auto target = static_cast<double>(i % C);
        // Rejection sampling toward the balanced target label.
        for (int attempt = 0;; ++attempt) {
            content.resize(length(rng));
            for (auto& t : content) t = tok(rng);
            if (s.generator == Generator::pattern_presence && target == 1.0) {
                std::uniform_int_distribution<std::size_t> at(0, content.size() - s.motif_length);
                std::copy(rules.motif.begin(), rules.motif.end(), content.begin() + static_cast<std::ptrdiff_t>(at(rng)));
            }
            clean = detail::apply_rule(s, rules, detail::finish(content, s.seq_len));
            bool ok = clean == target;
            if (ok && s.generator == Generator::majority) {
                std::vector<std::size_t> counts(C, 0);
                for (int t : content) ++counts[static_cast<std::size_t>(rules.group[static_cast<std::size_t>(t)])];
                auto sorted = counts;
                std::sort(sorted.rbegin(), sorted.rend());
                ok = sorted[0] > sorted[1];
            }
            if (ok) break;
            if (attempt > 10000) throw std::runtime_error("synthetic generator could not reach a balanced label");
        }
        double label = clean;
        if (flip(rng)) label = static_cast<double>(any_class(rng));
        out.examples.push_back({detail::finish(content, s.seq_len), label});
    }
    return out;
}

// Word to id map shared across a run. The first `direct` distinct words get
// their own ids in order of appearance, later words hash into the remaining
// range.
class Vocabulary {
public:
    Vocabulary(std::size_t vocab_size, std::uint64_t seed, std::size_t direct = 0)
        : size_(vocab_size), seed_(seed), direct_(direct == 0 ? (vocab_size - 2) / 2 : direct) {
        if (vocab_size < 4) throw std::invalid_argument("vocabulary needs at least 4 ids");
        if (direct_ + 2 >= vocab_size) throw std::invalid_argument("vocabulary leaves no room for hashed words");
    }

    int id(const std::string& word) {
        if (auto it = ids_.find(word); it != ids_.end()) return it->second;
        if (ids_.size() < direct_) {
            const int id = static_cast<int>(ids_.size()) + 2;
            ids_.emplace(word, id);
            return id;
        }
        return hashed(word);
    }

    int hashed(const std::string& word) const {
        std::uint64_t h = 1469598103934665603ULL ^ seed_;
        for (unsigned char c : word) h = (h ^ c) * 1099511628211ULL;
        const std::size_t base = direct_ + 2;
        return static_cast<int>(base + h % (size_ - base));
    }

    std::size_t size() const { return size_; }
    std::size_t known() const { return ids_.size(); }

private:
    std::size_t size_;
    std::uint64_t seed_;
    std::size_t direct_;
    std::map<std::string, int> ids_;
};

// Header row then "text<TAB>label" rows. Classification labels must be class
// indices below `classes`; classes == 0 reads real-valued targets.
inline Dataset ingest_tsv(const std::string& path, Vocabulary& vocab, std::size_t seq_len, std::size_t classes) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    Dataset out;
    out.name = path;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!header) {
            header = true;
            continue;
        }
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 2 tab-separated columns");
        }
        const std::string text = line.substr(0, tab), label_text = line.substr(tab + 1);
        double label = 0.0;
        try {
            std::size_t used = 0;
            label = std::stod(label_text, &used);
            if (used != label_text.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": label '" + label_text + "' is not a number");
        }
        if (classes > 0 && (label < 0 || label >= static_cast<double>(classes) || label != std::floor(label))) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": label " + label_text +
                                     " is not a class index below " + std::to_string(classes));
        }
        std::vector<int> tokens{kClsToken};
        std::istringstream words(text);
        std::string w;
        while (words >> w) {
            if (tokens.size() == seq_len) break;
            tokens.push_back(vocab.id(w));
        }
        if (tokens.size() == 1) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty text");
        tokens.resize(seq_len, kPadToken);
        out.examples.push_back({std::move(tokens), label});
    }
    if (out.empty()) throw std::runtime_error(path + ": no examples");
    return out;
}

}  // namespace camtl
