#pragma once

// White-box untargeted attacks on eval-mode models. Inputs live in [0, 1].

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "robnas/bounds.hpp"
#include "robnas/data.hpp"
#include "robnas/model.hpp"

namespace robnas {

enum class AttackKind { fgsm, pgd, cw_l2 };

std::string_view attack_kind_name(AttackKind k);
AttackKind parse_attack_kind(std::string_view s);

struct AttackConfig {
    AttackKind kind = AttackKind::pgd;
    Real eps = 0.03;
    Real step = Real(2) / 255;
    std::size_t iterations = 10;
    Norm norm = Norm::linf;
    bool random_start = true;
    // cw_l2
    Real c = 1;
    Real kappa = 0;
    Real lr = 0.01;
    std::uint64_t seed = 0;

    void validate() const;
    /// Short tag such as "pgd10-linf-0.03".
    std::string label() const;
    nlohmann::json to_json() const;
};

/// Gradient of the summed per-example cross-entropy with respect to x.
Tensor input_gradient(const Model& model, const Tensor& x, const std::vector<std::size_t>& y);

/// clamp(x + eps * sign(grad_x L), 0, 1).
Tensor fgsm(const Model& model, const Tensor& x, const std::vector<std::size_t>& y, Real eps);

/// Projected gradient ascent: sign steps and coordinate clipping for linf,
/// normalized steps and radial rescaling for l2; every iterate is clamped to [0, 1].
Tensor pgd(const Model& model, const Tensor& x, const std::vector<std::size_t>& y, const AttackConfig& cfg);

struct CwResult {
    Tensor x_adv;
    std::vector<bool> success;
};

/// Minimizes ||d||^2 + c * max(z_y - max_{k != y} z_k, -kappa) with Adam in
/// tanh space. Keeps the smallest successful perturbation; an example that
/// never succeeds is returned unchanged.
CwResult cw_l2(const Model& model, const Tensor& x, const std::vector<std::size_t>& y, const AttackConfig& cfg);

Tensor run_attack(const Model& model, const Tensor& x, const std::vector<std::size_t>& y, const AttackConfig& cfg);

struct AttackOutcome {
    AttackConfig config;
    Real accuracy = 0;
    std::vector<bool> correct;  // per example, on the adversarial input
};

struct RobustnessReport {
    Real clean_accuracy = 0;
    std::vector<bool> clean_correct;
    std::vector<AttackOutcome> attacks;

    nlohmann::json to_json() const;
};

/// Accuracy on adversarial inputs per attack; the random start of every batch is
/// seeded from the attack's seed and the batch index.
RobustnessReport evaluate_robust_accuracy(const Model& model, const Dataset& data,
                                          const std::vector<AttackConfig>& attacks, std::size_t batch = 128);

}  // namespace robnas
