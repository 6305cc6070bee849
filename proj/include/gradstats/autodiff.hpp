#ifndef GRADSTATS_AUTODIFF_HPP
#define GRADSTATS_AUTODIFF_HPP

#include "gradstats/graph.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gradstats {

/// A parameter feeds more than one equation. Shared weights are not supported.
class TiedWeightError : public GraphError {
 public:
  using GraphError::GraphError;
};

/// The primitive has no reverse-mode rule (custom ops, derivative helpers).
class MissingVjpError : public GraphError {
 public:
  using GraphError::GraphError;
};

struct GradOptions {
  // Append the loss value as a final, unlabelled output.
  bool include_loss = false;
};

/// Builds the reverse-mode gradient program of a scalar loss.
///
/// The loss must be the sum over the batch of per-example losses. The result
/// recomputes the forward equations, seeds the loss cotangent with 1 and emits
/// one output per entry of `wrt`, labelled with the parameter it belongs to.
/// The equation that sums a parameter's gradient over the batch axis is tagged
/// with `batch_reduce_of`.
Graph grad_graph(const Graph& loss, std::span<const VarId> wrt, GradOptions options = {});

/// Central differences (f(θ+h e_k) - f(θ-h e_k)) / 2h for every coordinate of
/// every parameter in `wrt`.
std::vector<Tensor> finite_difference(const Graph& loss, const Bindings& bindings, std::span<const VarId> wrt,
                                      double h);

namespace testing {
/// Negates every cotangent produced by the named primitive's rule
/// ("contract", "tanh", ...). Used to check that verification catches faults.
void set_vjp_fault(std::optional<std::string> primitive);
std::optional<std::string> vjp_fault();
}  // namespace testing

}  // namespace gradstats

#endif  // GRADSTATS_AUTODIFF_HPP
