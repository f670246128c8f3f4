#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dithc/tensor.h"

namespace dithc {

// A trainable tensor plus its gradient slot. Gradient accumulation is the
// hook site: a one-shot accumulate hook (armed per backward) runs first,
// then the persistent ready hooks.
class Parameter {
 public:
  Parameter(std::string name, Tensor value);

  const std::string& name() const { return name_; }
  Tensor& value() { return value_; }
  const Tensor& value() const { return value_; }
  Tensor& grad() { return grad_; }
  const Tensor& grad() const { return grad_; }
  bool has_grad() const { return grad_.defined(); }

  // First accumulation adopts `g`; later ones add into the existing grad.
  void accumulate_grad(const Tensor& g);
  void zero_grad() { grad_ = Tensor(); }

  void set_accumulate_hook(std::function<void(Parameter&)> hook) { acc_hook_ = std::move(hook); }
  bool accumulate_hook_armed() const { return static_cast<bool>(acc_hook_); }
  int add_ready_hook(std::function<void(Parameter&)> hook);
  void remove_ready_hook(int id);

 private:
  std::string name_;
  Tensor value_;
  Tensor grad_;
  std::function<void(Parameter&)> acc_hook_;
  std::map<int, std::function<void(Parameter&)>> ready_hooks_;
  int next_hook_ = 0;
};

// Layer with explicit forward and backward. Modules keep whatever they need
// for backward in saved tensors and drop them when backward returns.
class Module {
 public:
  virtual ~Module() = default;
  virtual std::string name() const = 0;
  virtual std::vector<Tensor> forward(std::span<const Tensor> inputs) = 0;
  // One gradient per forward output (undefined = zero). Returns one entry
  // per forward input; undefined where the input takes no gradient.
  virtual std::vector<Tensor> backward(std::span<const Tensor> grad_outputs) = 0;
  virtual std::vector<Parameter*> parameters() { return {}; }
  virtual std::vector<Tensor> saved_tensors() const { return {}; }
  virtual void clear_saved() {}
};

// Static DAG of modules executed in insertion order. Forward drops each
// value after its last consumer; backward runs nodes in reverse order and
// sums gradients of values with several consumers.
class ModuleGraph {
 public:
  using ValueId = int;

  ValueId add_input(std::string name);
  std::vector<ValueId> add_node(std::shared_ptr<Module> m, std::vector<ValueId> inputs, int num_outputs);
  void set_outputs(std::vector<ValueId> outputs);

  std::vector<Tensor> forward(const std::vector<Tensor>& inputs);
  // Gradients for the graph inputs (undefined where none flowed).
  std::vector<Tensor> backward(const std::vector<Tensor>& grad_outputs);

  std::size_t num_nodes() const { return nodes_.size(); }
  Module& node(std::size_t i) { return *nodes_.at(i).module; }
  const std::shared_ptr<Module>& node_ptr(std::size_t i) const { return nodes_.at(i).module; }
  void replace_module(std::size_t i, std::shared_ptr<Module> m);
  std::vector<Parameter*> parameters() const;

 private:
  struct Node {
    std::shared_ptr<Module> module;
    std::vector<ValueId> inputs;
    std::vector<ValueId> outputs;
  };
  std::vector<Node> nodes_;
  std::vector<ValueId> graph_inputs_;
  std::vector<ValueId> graph_outputs_;
  int num_values_ = 0;
  bool ran_forward_ = false;
};

}  // namespace dithc
