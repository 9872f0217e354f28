#include <spdlog/spdlog.h>

#include "polyverify/service.hpp"

namespace polyverify::service {

Verifier::Verifier(std::shared_ptr<sandbox::ContainerDriver> driver,
                   sandbox::PoolConfig pool_config, verifier::VerifyLimits limits)
    : driver_(std::move(driver)),
      images_(driver_),
      pool_(std::make_unique<sandbox::ContainerPool>(driver_, std::move(pool_config))),
      limits_(limits) {}

Verifier::~Verifier() { pool_->stop(); }

const LanguageEntry& Verifier::add_language(const langconfig::LanguageConfig& config) {
  const auto key = verifier::canonical_language(config.name);
  {
    std::lock_guard lock(mu_);
    if (auto it = languages_.find(key); it != languages_.end()) return it->second;
  }
  const auto plan = langconfig::build_plan(config);
  const auto tag = images_.ensure_image(plan);
  std::lock_guard lock(mu_);
  auto [it, inserted] = languages_.emplace(key, LanguageEntry{config, tag});
  if (inserted) {
    pool_->start_language(config.name, tag);
    spdlog::info("language {} ready to warm up (image {})", config.name, tag);
  }
  return it->second;
}

const LanguageEntry* Verifier::find(std::string_view language) const {
  std::lock_guard lock(mu_);
  auto it = languages_.find(verifier::canonical_language(language));
  return it == languages_.end() ? nullptr : &it->second;
}

std::vector<std::string> Verifier::language_names() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> names;
  for (const auto& [key, entry] : languages_) names.push_back(entry.config.name);
  return names;
}

verifier::Verdict Verifier::verify(const verifier::Candidate& candidate, const taskset::Task& task,
                                   const std::string& language) {
  const auto* entry = find(language);
  if (entry == nullptr) throw ServiceError("unknown language '" + language + "'");
  return verifier::verify_candidate(*pool_, candidate, task, entry->config, limits_);
}

std::vector<verifier::Verdict> Verifier::verify_group(
    const std::vector<verifier::Candidate>& candidates, const taskset::Task& task,
    const std::string& language) {
  const auto* entry = find(language);
  if (entry == nullptr) throw ServiceError("unknown language '" + language + "'");
  return verifier::verify_group(*pool_, candidates, task, entry->config, limits_);
}

}  // namespace polyverify::service
