#pragma once

#include <string>
#include <vector>

#include "glacier/error.hpp"
#include "glacier/grid.hpp"

namespace glacier {

/// Segmentation task definition.
///   binary_union   K=1, glacier = clean_ice or debris
///   multiclass_3   K=3, planes (clean_ice, debris, background)
///   binary_clean   K=1, clean_ice only   } the two halves of
///   binary_debris  K=1, debris only      } two_binaries
///   two_binaries   a pair of binary_clean and binary_debris models
enum class TaskMode { binary_union, multiclass_3, binary_clean, binary_debris, two_binaries };

inline std::string task_name(TaskMode m) {
    switch (m) {
        case TaskMode::binary_union: return "binary_union";
        case TaskMode::multiclass_3: return "multiclass_3";
        case TaskMode::binary_clean: return "binary_clean";
        case TaskMode::binary_debris: return "binary_debris";
        case TaskMode::two_binaries: return "two_binaries";
    }
    return "binary_union";
}

inline TaskMode parse_task(const std::string& s) {
    for (auto m : {TaskMode::binary_union, TaskMode::multiclass_3, TaskMode::binary_clean, TaskMode::binary_debris,
                   TaskMode::two_binaries})
        if (task_name(m) == s) return m;
    throw ConfigError("unknown task '" + s + "'");
}

/// Output plane count of a single model for the task.
inline std::size_t task_classes(TaskMode m) {
    if (m == TaskMode::two_binaries) throw ConfigError("two_binaries is a pair of K=1 models, not one model");
    return m == TaskMode::multiclass_3 ? 3 : 1;
}

inline std::vector<std::string> task_planes(TaskMode m) {
    switch (m) {
        case TaskMode::binary_union: return {"glacier"};
        case TaskMode::multiclass_3: return {"clean_ice", "debris", "background"};
        case TaskMode::binary_clean: return {"clean_ice"};
        case TaskMode::binary_debris: return {"debris"};
        case TaskMode::two_binaries: return {"clean_ice", "debris"};
    }
    return {};
}

/// Target planes for one model from a class-code grid.
inline Tensor3<float> task_target(const MaskGrid& classes, TaskMode m) {
    const std::size_t k = task_classes(m);
    Tensor3<float> t(k, classes.height(), classes.width());
    const auto v = classes.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto c = static_cast<GlacierClass>(v[i]);
        switch (m) {
            case TaskMode::binary_union: t.data()[i] = c != GlacierClass::background ? 1.0f : 0.0f; break;
            case TaskMode::binary_clean: t.data()[i] = c == GlacierClass::clean_ice ? 1.0f : 0.0f; break;
            case TaskMode::binary_debris: t.data()[i] = c == GlacierClass::debris ? 1.0f : 0.0f; break;
            case TaskMode::multiclass_3: {
                const std::size_t plane = c == GlacierClass::clean_ice ? 0 : c == GlacierClass::debris ? 1 : 2;
                t.data()[plane * v.size() + i] = 1.0f;
                break;
            }
            case TaskMode::two_binaries: break;
        }
    }
    return t;
}

}  // namespace glacier
