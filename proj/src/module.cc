#include "dithc/module.h"

#include <algorithm>

#include "dithc/ops.h"

namespace dithc {

Parameter::Parameter(std::string name, Tensor value) : name_(std::move(name)), value_(std::move(value)) {}

void Parameter::accumulate_grad(const Tensor& g) {
  if (g.shape() != value_.shape() || g.dtype() != value_.dtype())
    throw_argument("Parameter " + name_ + ": gradient " + shape_str(g.shape()) + " does not match " +
                   shape_str(value_.shape()));
  if (!grad_.defined())
    grad_ = g.is_contiguous() ? g : g.contiguous();
  else
    grad_ = ops::add(grad_, g, 1.0);
  if (acc_hook_) {
    auto hook = std::move(acc_hook_);
    acc_hook_ = nullptr;
    hook(*this);
  }
  for (auto& [id, h] : ready_hooks_) h(*this);
}

int Parameter::add_ready_hook(std::function<void(Parameter&)> hook) {
  ready_hooks_.emplace(next_hook_, std::move(hook));
  return next_hook_++;
}

void Parameter::remove_ready_hook(int id) { ready_hooks_.erase(id); }

ModuleGraph::ValueId ModuleGraph::add_input(std::string) {
  graph_inputs_.push_back(num_values_);
  return num_values_++;
}

std::vector<ModuleGraph::ValueId> ModuleGraph::add_node(std::shared_ptr<Module> m, std::vector<ValueId> inputs,
                                                        int num_outputs) {
  for (ValueId v : inputs)
    if (v < 0 || v >= num_values_) throw_argument("ModuleGraph: input value does not exist yet");
  Node n{std::move(m), std::move(inputs), {}};
  for (int k = 0; k < num_outputs; ++k) n.outputs.push_back(num_values_++);
  nodes_.push_back(std::move(n));
  return nodes_.back().outputs;
}

void ModuleGraph::set_outputs(std::vector<ValueId> outputs) { graph_outputs_ = std::move(outputs); }

void ModuleGraph::replace_module(std::size_t i, std::shared_ptr<Module> m) { nodes_.at(i).module = std::move(m); }

std::vector<Parameter*> ModuleGraph::parameters() const {
  std::vector<Parameter*> out;
  for (const auto& n : nodes_)
    for (Parameter* p : n.module->parameters()) out.push_back(p);
  return out;
}

std::vector<Tensor> ModuleGraph::forward(const std::vector<Tensor>& inputs) {
  if (inputs.size() != graph_inputs_.size()) throw_argument("ModuleGraph::forward: wrong number of inputs");
  std::vector<Tensor> values(static_cast<std::size_t>(num_values_));
  std::vector<int> remaining(static_cast<std::size_t>(num_values_), 0);
  for (const auto& n : nodes_)
    for (ValueId v : n.inputs) ++remaining[v];
  for (ValueId v : graph_outputs_) ++remaining[v];  // never dropped
  for (std::size_t i = 0; i < inputs.size(); ++i) values[graph_inputs_[i]] = inputs[i];
  for (auto& n : nodes_) {
    std::vector<Tensor> args;
    args.reserve(n.inputs.size());
    for (ValueId v : n.inputs) args.push_back(values[v]);
    auto outs = n.module->forward(args);
    if (outs.size() != n.outputs.size())
      throw_argument("ModuleGraph: " + n.module->name() + " returned the wrong number of outputs");
    args.clear();
    for (ValueId v : n.inputs)
      if (--remaining[v] == 0) values[v] = Tensor();
    for (std::size_t k = 0; k < outs.size(); ++k) values[n.outputs[k]] = std::move(outs[k]);
  }
  ran_forward_ = true;
  std::vector<Tensor> result;
  for (ValueId v : graph_outputs_) result.push_back(values[v]);
  return result;
}

std::vector<Tensor> ModuleGraph::backward(const std::vector<Tensor>& grad_outputs) {
  if (!ran_forward_) throw_argument("ModuleGraph::backward: no forward to differentiate");
  if (grad_outputs.size() != graph_outputs_.size()) throw_argument("ModuleGraph::backward: wrong number of grads");
  std::vector<Tensor> grads(static_cast<std::size_t>(num_values_));
  auto accumulate = [&](ValueId v, const Tensor& g) {
    if (!g.defined()) return;
    grads[v] = grads[v].defined() ? ops::add(grads[v], g, 1.0) : g;
  };
  for (std::size_t i = 0; i < grad_outputs.size(); ++i) accumulate(graph_outputs_[i], grad_outputs[i]);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    std::vector<Tensor> gout;
    for (ValueId v : it->outputs) {
      gout.push_back(grads[v]);
      grads[v] = Tensor();
    }
    auto gin = it->module->backward(gout);
    gout.clear();
    if (gin.size() != it->inputs.size())
      throw_argument("ModuleGraph: " + it->module->name() + " returned the wrong number of input grads");
    for (std::size_t k = 0; k < gin.size(); ++k) accumulate(it->inputs[k], gin[k]);
  }
  ran_forward_ = false;
  std::vector<Tensor> result;
  for (ValueId v : graph_inputs_) result.push_back(grads[v]);
  return result;
}

}  // namespace dithc
