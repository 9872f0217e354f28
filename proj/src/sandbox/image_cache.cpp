#include "polyverify/sandbox.hpp"

namespace polyverify::sandbox {

ImageCache::ImageCache(std::shared_ptr<ContainerDriver> driver) : driver_(std::move(driver)) {}

std::string ImageCache::ensure_image(const langconfig::ImageBuildPlan& plan) {
  std::promise<void> promise;
  std::shared_future<void> future;
  bool owner = false;
  {
    std::lock_guard lock(mu_);
    auto it = images_.find(plan.tag);
    if (it != images_.end()) {
      future = it->second;
    } else {
      future = promise.get_future().share();
      images_.emplace(plan.tag, future);
      owner = true;
    }
  }
  if (!owner) {
    future.get();
    return plan.tag;
  }
  try {
    if (!driver_->image_exists(plan.tag)) {
      {
        std::lock_guard lock(mu_);
        ++builds_;
      }
      driver_->build_image(plan);
    }
    promise.set_value();
  } catch (...) {
    promise.set_exception(std::current_exception());
    // A failed build is not cached; the next request tries again.
    std::lock_guard lock(mu_);
    images_.erase(plan.tag);
    throw;
  }
  return plan.tag;
}

std::size_t ImageCache::builds_started() const {
  std::lock_guard lock(mu_);
  return builds_;
}

}  // namespace polyverify::sandbox
