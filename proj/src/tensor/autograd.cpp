#include "marformer/autograd.hpp"

#include <unordered_map>
#include <unordered_set>

namespace marformer {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

bool needs_grad(const std::vector<Tensor>& inputs) {
  if (!g_grad_enabled) {
    return false;
  }
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) {
      return true;
    }
  }
  return false;
}

void record(Tensor& out, std::string name, std::vector<Tensor> inputs, BackwardFn fn) {
  if (!needs_grad(inputs)) {
    return;
  }
  auto node = std::make_shared<Node>();
  node->name = std::move(name);
  node->inputs = std::move(inputs);
  node->backward = std::move(fn);
  out.set_grad_fn(std::move(node));
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw TensorError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (loss.impl()->consumed) {
    throw TensorError("backward: graph already consumed");
  }
  if (!loss.requires_grad()) {
    throw TensorError("backward: loss is not connected to any tensor requiring grad");
  }

  using ImplPtr = std::shared_ptr<detail::TensorImpl>;
  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<ImplPtr> order;
  std::unordered_set<const detail::TensorImpl*> visited;
  std::vector<std::pair<ImplPtr, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& node = impl->grad_fn;
    if (node && next < node->inputs.size()) {
      const Tensor& in = node->inputs[next++];
      if (in.defined() && in.requires_grad() && !visited.count(in.impl().get())) {
        if (in.impl()->consumed) {
          throw TensorError("backward: graph already consumed");
        }
        visited.insert(in.impl().get());
        stack.emplace_back(in.impl(), 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  std::unordered_map<const detail::TensorImpl*, Tensor> grads;
  grads[loss.impl().get()] = Tensor::full(loss.shape(), 1.0, loss.dtype());

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const ImplPtr& impl = *it;
    auto found = grads.find(impl.get());
    if (found == grads.end()) {
      continue;
    }
    Tensor g = found->second;
    grads.erase(found);
    if (!impl->grad_fn) {
      if (impl->requires_grad) {
        Tensor(impl).accumulate_grad(g);
      }
      continue;
    }
    const auto& node = *impl->grad_fn;
    std::vector<Tensor> in_grads = node.backward(g, Tensor(impl));
    for (std::size_t i = 0; i < node.inputs.size() && i < in_grads.size(); ++i) {
      const Tensor& in = node.inputs[i];
      if (!in.defined() || !in.requires_grad() || !in_grads[i].defined()) {
        continue;
      }
      auto slot = grads.find(in.impl().get());
      if (slot == grads.end()) {
        grads.emplace(in.impl().get(), in_grads[i]);
      } else {
        // Fan-out: gradients add.
        Tensor acc = slot->second.clone();
        dispatch(acc.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto a = acc.data<T>();
          auto b = in_grads[i].data<T>();
          for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
        });
        slot->second = acc;
      }
    }
  }

  for (const ImplPtr& impl : order) {
    if (impl->grad_fn) {
      impl->grad_fn.reset();
      impl->consumed = true;
    }
  }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor& x, double h) {
  if (!(h > 0.0)) {
    throw TensorError("finite_diff_grad: step must be positive");
  }
  NoGradGuard guard;
  Tensor out(x.shape(), DType::f64);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double orig = x.get(i);
    x.set(i, orig + h);
    const double fp = f(x);
    x.set(i, orig - h);
    const double fm = f(x);
    x.set(i, orig);
    out.set(i, (fp - fm) / (2.0 * h));
  }
  return out;
}

}  // namespace marformer
