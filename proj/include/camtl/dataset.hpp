#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace camtl {

// One example: padded token ids plus a label. Classification labels hold the
// class index, regression labels the target value.
struct Example {
    std::vector<int> tokens;
    double label = 0.0;

    int class_index() const { return static_cast<int>(label); }
    bool operator==(const Example&) const = default;
};

struct Dataset {
    std::string name;
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
    const Example& operator[](std::size_t i) const { return examples[i]; }
    bool operator==(const Dataset&) const = default;
};

}  // namespace camtl
